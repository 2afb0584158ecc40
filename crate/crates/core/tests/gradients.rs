//! End-to-end parameter gradients against central differences, and the
//! equivalence of logit dynamics with one-hot softmax regression.

use plab_core::dynamics::{self, DynamicsConfig};
use plab_core::losses;
use plab_core::{DenseMatrix, LabelVector, LossKind, LossParams, Model, Rng};

fn loss_at(model: &Model, x: &[f64], y: &LabelVector, kind: LossKind, params: &LossParams) -> f64 {
    losses::evaluate(kind, &model.logits(x).unwrap(), y, params).unwrap().value
}

/// Compares backprop with central differences on up to `coords` parameters.
/// Identification weights move with the parameters under FD, so only losses
/// without them are used here.
fn check_model(mut model: Model, coords: usize, seed: u64) {
    let mut rng = Rng::new(seed);
    let d = model.inputs();
    let m = model.outputs();
    let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let y = LabelVector::from_indices(m, &rng.sample_indices(m, 2)).unwrap();
    let params = LossParams::default();
    for kind in [LossKind::Nll, LossKind::Libra, LossKind::Sag, LossKind::Uniform] {
        let (z, cache) = model.forward(&x).unwrap();
        let r = losses::evaluate(kind, &z, &y, &params).unwrap();
        let analytic = model.backward(&cache, &r.grad_logits).unwrap().flatten();
        let theta = model.flat_params();
        let picks = if theta.len() <= coords {
            (0..theta.len()).collect()
        } else {
            rng.sample_indices(theta.len(), coords)
        };
        let h = 1e-6;
        let scale = analytic.iter().fold(1e-3f64, |a, v| a.max(v.abs()));
        for i in picks {
            let mut t = theta.clone();
            t[i] = theta[i] + h;
            model.set_flat_params(&t).unwrap();
            let up = loss_at(&model, &x, &y, kind, &params);
            t[i] = theta[i] - h;
            model.set_flat_params(&t).unwrap();
            let down = loss_at(&model, &x, &y, kind, &params);
            model.set_flat_params(&theta).unwrap();
            let fd = (up - down) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / scale;
            assert!(err < 1e-5, "{kind} param {i}: fd {fd} vs analytic {}", analytic[i]);
        }
    }
}

#[test]
fn softmax_regression_gradients_match_fd() {
    let model = Model::softmax_regression(6, 5, &mut Rng::new(1)).unwrap();
    check_model(model, usize::MAX, 11);
}

#[test]
fn one_hidden_layer_gradients_match_fd() {
    let model = Model::mlp(10, &[50], 20, &mut Rng::new(2)).unwrap();
    check_model(model, 300, 12);
}

#[test]
fn deep_mlp_gradients_match_fd() {
    let model = Model::mlp(8, &[32; 10], 10, &mut Rng::new(3)).unwrap();
    check_model(model, 300, 13);
}

#[test]
fn one_hot_softmax_regression_reproduces_logit_dynamics() {
    // With x = [1], the weight column is the logit vector and a parameter
    // step is a logit step.
    let mut rng = Rng::new(4);
    let m = 7;
    let y = LabelVector::from_indices(m, &[1, 4, 5]).unwrap();
    let z0: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
    for kind in LossKind::ALL {
        let params = LossParams::default();
        let lr = 0.3;
        let steps = 200;
        let traj = dynamics::simulate(&z0, std::slice::from_ref(&y), &DynamicsConfig::new(kind, lr, steps)).unwrap();

        let mut model = Model::from_theta(DenseMatrix::from_vec(m, 1, z0.clone()).unwrap()).unwrap();
        for t in 0..steps {
            let (z, cache) = model.forward(&[1.0]).unwrap();
            let want = &traj.points[t].z;
            let gap = z.iter().zip(want).fold(0.0f64, |a, (u, v)| a.max((u - v).abs()));
            assert!(gap <= 1e-12, "{kind} step {t}: gap {gap:e}");
            let r = losses::evaluate(kind, &z, &y, &params).unwrap();
            let g = model.backward(&cache, &r.grad_logits).unwrap();
            model.sgd_step(&g, lr, 0.0).unwrap();
        }
    }
}
