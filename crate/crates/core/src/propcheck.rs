//! Numerical checks of ratio preservation.
//!
//! A loss preserves allowed-output ratios under a logit gradient step iff
//! the logit gradients `G_m = Σ_i (∂L/∂p_i) p_i (δ_im - p_m)` agree on all
//! allowed outputs. The residuals below measure how far that fails, from
//! finite differences of an arbitrary loss or from analytic partials.

use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate, DynamicsConfig};
use crate::error::{Error, Result};
use crate::label::LabelVector;
use crate::losses::{self, FrozenWeights, LossKind, LossParams};
use crate::numkit::Rng;

pub const DEFAULT_FD_STEP: f64 = 1e-6;
/// Boundary margin of random interior points.
pub const INTERIOR_MARGIN: f64 = 1e-3;

/// A loss seen only through its values at (possibly off-simplex) `p`.
pub trait BlackBoxLoss {
    fn value(&self, p: &[f64], y: &LabelVector) -> Result<f64>;
}

impl<F> BlackBoxLoss for F
where
    F: Fn(&[f64], &LabelVector) -> f64,
{
    fn value(&self, p: &[f64], y: &LabelVector) -> Result<f64> {
        Ok(self(p, y))
    }
}

/// A built-in loss with its identification weights frozen at one point.
#[derive(Debug, Clone)]
pub struct BuiltinLoss {
    pub kind: LossKind,
    pub params: LossParams,
    frozen: FrozenWeights,
}

impl BuiltinLoss {
    pub fn frozen_at(kind: LossKind, params: &LossParams, p: &[f64], y: &LabelVector) -> Result<Self> {
        Ok(Self {
            kind,
            params: params.clone(),
            frozen: losses::freeze_weights(kind, p, y, params)?,
        })
    }
}

impl BlackBoxLoss for BuiltinLoss {
    fn value(&self, p: &[f64], y: &LabelVector) -> Result<f64> {
        losses::value_in_probs(self.kind, p, y, &self.params, &self.frozen)
    }
}

/// Central differences `(L(p + h e_i) - L(p - h e_i)) / 2h`.
pub fn fd_grad_p(loss: &dyn BlackBoxLoss, p: &[f64], y: &LabelVector, h: f64) -> Result<Vec<f64>> {
    if !(1e-8..=1e-4).contains(&h) {
        return Err(Error::invalid(format!("finite-difference step {h} outside [1e-8, 1e-4]")));
    }
    y.check_len(p.len())?;
    if p.iter().any(|&v| !(v > 2.0 * h)) {
        return Err(Error::Domain("point too close to the simplex boundary".into()));
    }
    let mut q = p.to_vec();
    let mut g = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        q[i] = p[i] + h;
        let up = loss.value(&q, y)?;
        q[i] = p[i] - h;
        let down = loss.value(&q, y)?;
        q[i] = p[i];
        let d = (up - down) / (2.0 * h);
        if !d.is_finite() {
            return Err(Error::NonFinite(format!("finite difference in coordinate {i}")));
        }
        g.push(d);
    }
    Ok(g)
}

/// `G_m = Σ_i g_i p_i (δ_im - p_m)`: the logit gradient implied by the
/// probability partials `g`.
pub fn logit_gradient(grad_p: &[f64], p: &[f64]) -> Vec<f64> {
    let mean: f64 = grad_p.iter().zip(p).map(|(g, p)| g * p).sum();
    grad_p.iter().zip(p).map(|(g, p)| p * (g - mean)).collect()
}

fn class_spread(g: &[f64], members: impl Iterator<Item = usize>) -> Option<f64> {
    let vals: Vec<f64> = members.map(|i| g[i]).collect();
    if vals.len() < 2 {
        return None;
    }
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    Some(hi - lo)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResidual {
    pub p: Vec<f64>,
    pub allowed: Option<f64>,
    pub disallowed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// Worst allowed-pair residual, if any allowed pair was checked.
    pub allowed: Option<f64>,
    pub disallowed: Option<f64>,
    pub max: f64,
    pub points: Vec<PointResidual>,
    pub tol: f64,
    pub pass: bool,
}

impl ResidualReport {
    fn from_points(points: Vec<PointResidual>, tol: f64) -> Self {
        let worst = |f: fn(&PointResidual) -> Option<f64>| {
            points.iter().filter_map(f).fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v))))
        };
        let allowed = worst(|p| p.allowed);
        let disallowed = worst(|p| p.disallowed);
        let max = allowed.unwrap_or(0.0).max(disallowed.unwrap_or(0.0));
        Self {
            allowed,
            disallowed,
            max,
            points,
            tol,
            pass: max < tol,
        }
    }

    /// Combine reports over many points; the verdict uses `self.tol`.
    pub fn merge(reports: Vec<ResidualReport>) -> Option<Self> {
        let tol = reports.first()?.tol;
        let points = reports.into_iter().flat_map(|r| r.points).collect();
        Some(Self::from_points(points, tol))
    }
}

/// Residual from probability partials, normalized by `max(1, max |G|)`.
pub fn residual_from_grad(grad_p: &[f64], p: &[f64], y: &LabelVector, bi: bool) -> PointResidual {
    let g = logit_gradient(grad_p, p);
    let scale = g.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    PointResidual {
        p: p.to_vec(),
        allowed: class_spread(&g, y.allowed()).map(|v| v / scale),
        disallowed: if bi {
            class_spread(&g, y.disallowed()).map(|v| v / scale)
        } else {
            None
        },
    }
}

fn check_interior(p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Domain("residual checks need an interior point".into()));
    }
    Ok(())
}

/// Allowed-pair residual at one point, partials by finite differences.
pub fn prp_residual(loss: &dyn BlackBoxLoss, p: &[f64], y: &LabelVector, tol: f64) -> Result<ResidualReport> {
    if y.k() < 2 {
        return Err(Error::invalid("ratio preservation is vacuous with fewer than two allowed outputs"));
    }
    check_interior(p)?;
    let g = fd_grad_p(loss, p, y, DEFAULT_FD_STEP)?;
    Ok(ResidualReport::from_points(vec![residual_from_grad(&g, p, y, false)], tol))
}

/// Allowed- and disallowed-pair residuals at one point.
pub fn biprp_residual(loss: &dyn BlackBoxLoss, p: &[f64], y: &LabelVector, tol: f64) -> Result<ResidualReport> {
    if y.k() < 2 && y.m() - y.k() < 2 {
        return Err(Error::invalid("no output class has two members"));
    }
    check_interior(p)?;
    let g = fd_grad_p(loss, p, y, DEFAULT_FD_STEP)?;
    Ok(ResidualReport::from_points(vec![residual_from_grad(&g, p, y, true)], tol))
}

/// Uniform simplex points with every coordinate at least about
/// [`INTERIOR_MARGIN`].
pub fn random_interior_points(m: usize, count: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..count).map(|_| rng.interior_point(m, INTERIOR_MARGIN)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradSource {
    FiniteDifference,
    Analytic,
}

/// Residuals of a built-in loss over `count` random interior points with
/// label `y`. `bi` adds the disallowed class.
#[allow(clippy::too_many_arguments)]
pub fn check_builtin(
    kind: LossKind,
    params: &LossParams,
    y: &LabelVector,
    count: usize,
    source: GradSource,
    bi: bool,
    tol: f64,
    rng: &mut Rng,
) -> Result<ResidualReport> {
    if count == 0 {
        return Err(Error::invalid("need at least one point"));
    }
    let mut points = Vec::with_capacity(count);
    for p in random_interior_points(y.m(), count, rng) {
        let g = match source {
            GradSource::Analytic => losses::prob_gradient(kind, &p, y, params)?,
            GradSource::FiniteDifference => {
                let loss = BuiltinLoss::frozen_at(kind, params, &p, y)?;
                fd_grad_p(&loss, &p, y, DEFAULT_FD_STEP)?
            }
        };
        points.push(residual_from_grad(&g, &p, y, bi));
    }
    Ok(ResidualReport::from_points(points, tol))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioDrift {
    /// `max |r_t / r_0 - 1|` over allowed pairs and all steps.
    pub allowed: f64,
    pub disallowed: f64,
    /// Allowed drift after each step (index 0 is the start).
    pub allowed_series: Vec<f64>,
}

/// Uses `p_i / p_j = exp(z_i - z_j)`, which stays accurate after the
/// probabilities themselves underflow.
fn pair_drift(z0: &[f64], z: &[f64], members: &[usize]) -> f64 {
    let mut worst = 0.0f64;
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            let change = (z[i] - z[j]) - (z0[i] - z0[j]);
            worst = worst.max(change.exp_m1().abs());
        }
    }
    worst
}

/// Simulate `steps` gradient steps on the logits and report the largest
/// relative change of any same-class probability ratio.
pub fn ratio_drift(
    kind: LossKind,
    params: &LossParams,
    z: &[f64],
    y: &LabelVector,
    learning_rate: f64,
    steps: usize,
) -> Result<RatioDrift> {
    let cfg = DynamicsConfig {
        params: params.clone(),
        ..DynamicsConfig::new(kind, learning_rate, steps)
    };
    let traj = simulate(z, std::slice::from_ref(y), &cfg)?;
    let allowed: Vec<usize> = y.allowed().collect();
    let disallowed: Vec<usize> = y.disallowed().collect();
    let z0 = &traj.first().z;
    let allowed_series: Vec<f64> = traj.points.iter().map(|pt| pair_drift(z0, &pt.z, &allowed)).collect();
    let disallowed_max = traj
        .points
        .iter()
        .map(|pt| pair_drift(z0, &pt.z, &disallowed))
        .fold(0.0, f64::max);
    Ok(RatioDrift {
        allowed: allowed_series.iter().copied().fold(0.0, f64::max),
        disallowed: disallowed_max,
        allowed_series,
    })
}

/// `|Σ_j ∂L/∂z_j|` at logits `z`.
pub fn grad_sum(kind: LossKind, z: &[f64], y: &LabelVector, params: &LossParams) -> Result<f64> {
    Ok(losses::evaluate(kind, z, y, params)?.grad_sum().abs())
}

/// Fails unless the logit gradient sums to zero within `tol`. Only
/// meaningful for probability-defined losses without the logit penalty.
pub fn assert_grad_sum_zero(kind: LossKind, z: &[f64], y: &LabelVector, params: &LossParams, tol: f64) -> Result<()> {
    if !kind.is_probability_defined() {
        return Err(Error::invalid(format!("{kind} is not a function of p alone")));
    }
    let s = grad_sum(kind, z, y, params)?;
    if s > tol {
        return Err(Error::Domain(format!("{kind}: gradient sum {s:e} exceeds {tol:e}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn y(bits: &[u8]) -> LabelVector {
        LabelVector::from_binary(bits).unwrap()
    }

    #[test]
    fn fd_of_linear_and_constant() {
        let labels = y(&[1, 0, 1]);
        let sum = |p: &[f64], _: &LabelVector| p.iter().sum::<f64>();
        let g = fd_grad_p(&sum, &[0.2, 0.3, 0.5], &labels, 1e-6).unwrap();
        assert!(g.iter().all(|v| (v - 1.0).abs() < 1e-8));
        let constant = |_: &[f64], _: &LabelVector| 3.0;
        assert_eq!(fd_grad_p(&constant, &[0.2, 0.3, 0.5], &labels, 1e-6).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn fd_preconditions() {
        let labels = y(&[1, 0]);
        let f = |p: &[f64], _: &LabelVector| p[0];
        assert!(fd_grad_p(&f, &[0.5, 0.5], &labels, 1e-3).is_err());
        assert!(fd_grad_p(&f, &[0.5, 0.5], &labels, 1e-9).is_err());
        assert!(fd_grad_p(&f, &[1.5e-6, 1.0], &labels, 1e-6).is_err());
    }

    #[test]
    fn fd_nll_matches_closed_form() {
        let labels = y(&[1, 1, 0, 0]);
        let p = [0.1, 0.3, 0.4, 0.2];
        let loss = BuiltinLoss::frozen_at(LossKind::Nll, &LossParams::default(), &p, &labels).unwrap();
        let g = fd_grad_p(&loss, &p, &labels, 1e-6).unwrap();
        let expected = [-2.5, -2.5, 0.0, 0.0];
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn logit_gradient_recovers_closed_forms() {
        let labels = y(&[1, 1, 0]);
        let p = [0.5, 0.3, 0.2];
        let params = LossParams::default();
        for kind in [LossKind::Nll, LossKind::Libra, LossKind::Sag, LossKind::Uniform] {
            let gp = losses::prob_gradient(kind, &p, &labels, &params).unwrap();
            let direct = losses::evaluate_probs(kind, &p, &labels, &params).unwrap().grad_logits;
            for (a, b) in logit_gradient(&gp, &p).iter().zip(&direct) {
                assert!((a - b).abs() < 1e-14, "{kind}");
            }
        }
    }

    #[test]
    fn libra_and_its_monotone_transform_pass() {
        let labels = y(&[1, 1, 1, 0, 0]);
        let mut rng = Rng::new(1);
        let params = LossParams::default();
        for p in random_interior_points(5, 20, &mut rng) {
            let base = BuiltinLoss::frozen_at(LossKind::Libra, &params, &p, &labels).unwrap();
            assert!(prp_residual(&base, &p, &labels, 1e-6).unwrap().pass);
            let cubed = |q: &[f64], yy: &LabelVector| {
                let v = base.value(q, yy).unwrap();
                v * v * v + v
            };
            assert!(prp_residual(&cubed, &p, &labels, 1e-5).unwrap().pass);
        }
    }

    #[test]
    fn nll_fails_at_unequal_point() {
        let labels = y(&[1, 1, 0]);
        let p = [0.6, 0.1, 0.3];
        let loss = BuiltinLoss::frozen_at(LossKind::Nll, &LossParams::default(), &p, &labels).unwrap();
        let r = prp_residual(&loss, &p, &labels, 1e-6).unwrap();
        assert!(r.max > 1e-3 && !r.pass);
    }

    #[test]
    fn bi_residual_classes() {
        let labels = y(&[1, 1, 0, 0, 0]);
        let params = LossParams::default();
        let mut rng = Rng::new(2);
        let sag = check_builtin(LossKind::Sag, &params, &labels, 50, GradSource::FiniteDifference, true, 1e-6, &mut rng).unwrap();
        assert!(sag.pass, "{:?}", sag.max);
        let libra = check_builtin(LossKind::Libra, &params, &labels, 50, GradSource::Analytic, true, 1e-6, &mut rng).unwrap();
        assert!(libra.allowed.unwrap() < 1e-12);
        assert!(libra.disallowed.unwrap() > 1e-3);
    }

    #[test]
    fn vacuous_checks_rejected() {
        let f = |p: &[f64], _: &LabelVector| p[0];
        assert!(prp_residual(&f, &[0.5, 0.5], &y(&[1, 0]), 1e-6).is_err());
        assert!(biprp_residual(&f, &[0.5, 0.5], &y(&[1, 0]), 1e-6).is_err());
    }

    #[test]
    fn drift_libra_flat_nll_growing() {
        let labels = y(&[1, 1, 0, 0]);
        let z = [0.3, -0.2, 0.5, 0.1];
        let params = LossParams::default();
        let libra = ratio_drift(LossKind::Libra, &params, &z, &labels, 1.0, 1000).unwrap();
        assert!(libra.allowed < 1e-9);
        let sag = ratio_drift(LossKind::Sag, &params, &z, &labels, 1.0, 1000).unwrap();
        assert!(sag.allowed < 1e-9 && sag.disallowed < 1e-9, "{} {}", sag.allowed, sag.disallowed);
        let nll = ratio_drift(LossKind::Nll, &params, &z, &labels, 1.0, 100).unwrap();
        assert!(nll.allowed_series.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn grad_sum_assertion() {
        let labels = y(&[1, 0, 1]);
        let z = [0.2, -1.0, 0.4];
        for kind in LossKind::ALL.into_iter().filter(|k| k.is_probability_defined()) {
            assert_grad_sum_zero(kind, &z, &labels, &LossParams::default(), 1e-12).unwrap();
        }
        assert!(assert_grad_sum_zero(LossKind::Lws, &z, &labels, &LossParams::default(), 1e-12).is_err());
    }
}
