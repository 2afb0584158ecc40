//! Mini-batch SGD over a [`Dataset`], evaluation metrics and seed sweeps.
//!
//! Argmax and top-k ties go to the lowest output index throughout.

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::label::LabelVector;
use crate::losses::{self, LossKind, LossParams};
use crate::models::{Model, ParamGrads};
use crate::numkit::{argmax, softmax, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    /// Epochs without a training-loss improvement of at least `min_delta`.
    pub patience: usize,
    #[serde(default)]
    pub min_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub params: LossParams,
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None` trains full batch.
    pub batch_size: Option<usize>,
    pub weight_decay: f64,
    pub seed: u64,
    /// Record metrics every n epochs; the last epoch is always recorded.
    pub eval_every: usize,
    pub shuffle: bool,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Libra,
            params: LossParams::training(),
            learning_rate: 0.1,
            epochs: 500,
            batch_size: None,
            weight_decay: 0.0,
            seed: 0,
            eval_every: 1,
            shuffle: true,
            early_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn new(loss: LossKind, learning_rate: f64, epochs: usize) -> Self {
        Self {
            loss,
            learning_rate,
            epochs,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight decay must be finite and >= 0"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be at least 1"));
        }
        self.params.validate_for(self.loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample objective seen during the epoch, before each update.
    pub train_loss: f64,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub p_pos: f64,
    pub p_neg: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub steps: usize,
    pub early_stopped: bool,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "train_accuracy", "test_accuracy", "p_pos", "p_neg"])?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                opt(r.train_accuracy),
                opt(r.test_accuracy),
                r.p_pos.to_string(),
                opt(r.p_neg),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Train `model` in place.
///
/// Per-sample gradients are averaged over each batch. When the dataset
/// carries negative label sets and `neg_gamma > 0`, the sampled negative
/// term is added to every sample's objective.
pub fn train(dataset: &Dataset, model: &mut Model, config: &TrainConfig, test: Option<&Dataset>) -> Result<TrainHistory> {
    config.validate()?;
    check_dims(dataset, model)?;
    if let Some(t) = test {
        check_dims(t, model)?;
    }
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let n = dataset.n();
    let batch = config.batch_size.unwrap_or(n).min(n);
    let mut rng = Rng::new(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grads = ParamGrads::zeros_like(model);
    let mut history = TrainHistory::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;

    for epoch in 1..=config.epochs {
        if config.shuffle && batch < n {
            rng.shuffle(&mut order);
        }
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            grads.scale(0.0);
            for &i in chunk {
                let s = &dataset.samples()[i];
                let (z, cache) = model.forward(&s.x)?;
                let r = losses::evaluate_with_negatives(
                    config.loss,
                    &z,
                    &s.y,
                    dataset.negatives(),
                    &mut rng,
                    &config.params,
                )
                .map_err(|e| match e {
                    Error::Domain(_) | Error::NonFinite(_) => Error::NonFiniteLoss {
                        step: history.steps,
                        sample: i,
                    },
                    other => other,
                })?;
                if !r.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: history.steps,
                        sample: i,
                    });
                }
                loss_sum += r.value;
                model.backward_into(&cache, &r.grad_logits, &mut grads)?;
            }
            grads.scale(1.0 / chunk.len() as f64);
            model.sgd_step(&grads, config.learning_rate, config.weight_decay)?;
            history.steps += 1;
        }
        let train_loss = loss_sum / n as f64;

        let mut stop = false;
        if let Some(es) = &config.early_stop {
            if train_loss < best - es.min_delta {
                best = train_loss;
                stale = 0;
            } else {
                stale += 1;
                stop = stale > es.patience;
            }
        }
        if stop || epoch == config.epochs || epoch % config.eval_every == 0 {
            history.records.push(evaluate_epoch(epoch, train_loss, model, dataset, test)?);
        }
        if stop {
            history.early_stopped = true;
            break;
        }
    }
    Ok(history)
}

fn check_dims(dataset: &Dataset, model: &Model) -> Result<()> {
    if dataset.d() != model.inputs() {
        return Err(Error::DimensionMismatch {
            expected: model.inputs(),
            got: dataset.d(),
        });
    }
    if dataset.m() != model.outputs() {
        return Err(Error::DimensionMismatch {
            expected: model.outputs(),
            got: dataset.m(),
        });
    }
    Ok(())
}

fn evaluate_epoch(
    epoch: usize,
    train_loss: f64,
    model: &Model,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<EpochRecord> {
    let probs = predict(model, train)?;
    let has_truth = train.samples().iter().all(|s| s.y_true.is_some());
    let train_accuracy = if has_truth { Some(accuracy_from(&probs, train)?) } else { None };
    let test_accuracy = match test {
        Some(t) if !t.is_empty() => Some(accuracy(model, t)?),
        _ => None,
    };
    let p_neg = if train.negatives().is_empty() {
        None
    } else {
        Some(p_neg_from(&probs, train.negatives()))
    };
    Ok(EpochRecord {
        epoch,
        train_loss,
        train_accuracy,
        test_accuracy,
        p_pos: p_pos_from(&probs, train),
        p_neg,
    })
}

/// Softmax output for every sample.
pub fn predict(model: &Model, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    dataset.samples().iter().map(|s| softmax(&model.logits(&s.x)?)).collect()
}

fn accuracy_from(probs: &[Vec<f64>], dataset: &Dataset) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let mut hits = 0usize;
    for (i, (p, s)) in probs.iter().zip(dataset.samples()).enumerate() {
        let t = s
            .y_true
            .ok_or_else(|| Error::invalid(format!("sample {i} has no true label")))?;
        hits += (argmax(p) == t) as usize;
    }
    Ok(hits as f64 / probs.len() as f64)
}

fn p_pos_from(probs: &[Vec<f64>], dataset: &Dataset) -> f64 {
    let total: f64 = probs.iter().zip(dataset.samples()).map(|(p, s)| s.y.allowed_mass(p)).sum();
    total / probs.len() as f64
}

fn forbidden_mask(m: usize, negatives: &[LabelVector]) -> Vec<bool> {
    let mut mask = vec![false; m];
    for n in negatives {
        n.allowed().for_each(|i| mask[i] = true);
    }
    mask
}

fn p_neg_from(probs: &[Vec<f64>], negatives: &[LabelVector]) -> f64 {
    let Some(first) = probs.first() else {
        return 0.0;
    };
    let mask = forbidden_mask(first.len(), negatives);
    let total: f64 = probs
        .iter()
        .map(|p| p.iter().zip(&mask).filter(|(_, &f)| f).map(|(v, _)| v).sum::<f64>())
        .sum();
    total / probs.len() as f64
}

/// Fraction of samples whose argmax equals the true label.
pub fn accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    accuracy_from(&predict(model, dataset)?, dataset)
}

/// Mean probability on each sample's allowed outputs.
pub fn p_pos(model: &Model, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("P_pos of an empty dataset"));
    }
    Ok(p_pos_from(&predict(model, dataset)?, dataset))
}

/// Mean probability on `I_neg`, the union of the negative label sets.
pub fn p_neg(model: &Model, dataset: &Dataset, negatives: &[LabelVector]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("P_neg of an empty dataset"));
    }
    if negatives.iter().any(|n| n.m() != dataset.m()) {
        return Err(Error::invalid("negative label set has the wrong length"));
    }
    Ok(p_neg_from(&predict(model, dataset)?, negatives))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HitTarget {
    /// The sample's own allowed outputs.
    Allowed,
    /// `I_neg` of the dataset's negative label sets.
    Forbidden,
}

/// Indices of the `k` largest entries, ties to the lower index.
pub fn top_k(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Fraction of samples whose top-k outputs intersect the target set.
pub fn hit_at_k(model: &Model, dataset: &Dataset, k: usize, target: HitTarget) -> Result<f64> {
    if k == 0 || k > dataset.m() {
        return Err(Error::invalid(format!("k must be in 1..={}, got {k}", dataset.m())));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("H@k of an empty dataset"));
    }
    let forbidden = dataset.forbidden_outputs();
    let probs = predict(model, dataset)?;
    let hits = probs
        .iter()
        .zip(dataset.samples())
        .filter(|(p, s)| {
            top_k(p, k).into_iter().any(|i| match target {
                HitTarget::Allowed => s.y.is_allowed(i),
                HitTarget::Forbidden => forbidden[i],
            })
        })
        .count();
    Ok(hits as f64 / dataset.n() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Argmax on the first sample's input after training.
    pub prediction: Option<usize>,
    pub success: bool,
    pub final_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub loss: LossKind,
    pub optimal_output: Option<usize>,
    pub outcomes: Vec<SeedOutcome>,
    /// Successes over all seeds; failed runs count against it.
    pub success_rate: Option<f64>,
    pub errors: usize,
}

impl SweepReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["seed", "prediction", "success", "final_loss", "train_accuracy", "error"])?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for o in &self.outcomes {
            w.write_record([
                o.seed.to_string(),
                o.prediction.map(|p| p.to_string()).unwrap_or_default(),
                o.success.to_string(),
                opt(o.final_loss),
                opt(o.train_accuracy),
                o.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Train a fresh model per seed and count how often `optimal_output` wins
/// the argmax on the first sample's input. Seeds run in parallel; each run
/// uses its seed for both the model factory and the training RNG.
pub fn sweep<F>(
    dataset: &Dataset,
    factory: F,
    config: &TrainConfig,
    seeds: &[u64],
    optimal_output: Option<usize>,
) -> Result<SweepReport>
where
    F: Fn(u64) -> Result<Model> + Sync,
{
    if seeds.is_empty() {
        return Err(Error::invalid("a sweep needs at least one seed"));
    }
    if seeds.iter().collect::<HashSet<_>>().len() != seeds.len() {
        return Err(Error::invalid("sweep seeds must be distinct"));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("cannot sweep over an empty dataset"));
    }
    if optimal_output.is_some_and(|o| o >= dataset.m()) {
        return Err(Error::invalid("optimal output out of range"));
    }
    config.validate()?;
    let canonical = &dataset.samples()[0].x;

    let outcomes: Vec<SeedOutcome> = seeds
        .par_iter()
        .map(|&seed| {
            let run = || -> Result<(usize, TrainHistory)> {
                let mut model = factory(seed)?;
                let cfg = TrainConfig { seed, ..config.clone() };
                let history = train(dataset, &mut model, &cfg, None)?;
                Ok((argmax(&model.logits(canonical)?), history))
            };
            match run() {
                Ok((prediction, history)) => {
                    let last = history.last();
                    SeedOutcome {
                        seed,
                        prediction: Some(prediction),
                        success: optimal_output == Some(prediction),
                        final_loss: last.map(|r| r.train_loss),
                        train_accuracy: last.and_then(|r| r.train_accuracy),
                        error: None,
                    }
                }
                Err(e) => SeedOutcome {
                    seed,
                    prediction: None,
                    success: false,
                    final_loss: None,
                    train_accuracy: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    let errors = outcomes.iter().filter(|o| o.error.is_some()).count();
    let success_rate =
        optimal_output.map(|_| outcomes.iter().filter(|o| o.success).count() as f64 / outcomes.len() as f64);
    Ok(SweepReport {
        loss: config.loss,
        optimal_output,
        outcomes,
        success_rate,
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{Provenance, Sample};
    use crate::numkit::DenseMatrix;

    fn separable(n: usize, rng: &mut Rng) -> Dataset {
        let samples = (0..n)
            .map(|_| {
                let c = rng.index(2);
                let sign = if c == 0 { 1.0 } else { -1.0 };
                Sample {
                    x: vec![sign * rng.uniform_in(0.5, 2.0), rng.uniform_in(-1.0, 1.0)],
                    y: LabelVector::from_indices(2, &[c]).unwrap(),
                    y_true: Some(c),
                }
            })
            .collect();
        Dataset::new(2, 2, samples, vec![], Provenance::manual()).unwrap()
    }

    #[test]
    fn logistic_regression_separates() {
        let ds = separable(100, &mut Rng::new(1));
        let mut model = Model::softmax_regression(2, 2, &mut Rng::new(2)).unwrap();
        let cfg = TrainConfig::new(LossKind::Nll, 0.5, 200);
        let h = train(&ds, &mut model, &cfg, None).unwrap();
        assert_eq!(h.last().unwrap().train_accuracy, Some(1.0));
        assert_eq!(h.records.len(), 200);
    }

    #[test]
    fn tiny_learning_rate_is_a_no_op() {
        let ds = separable(50, &mut Rng::new(3));
        let mut model = Model::mlp(2, &[8], 2, &mut Rng::new(4)).unwrap();
        let before = accuracy(&model, &ds).unwrap();
        train(&ds, &mut model, &TrainConfig::new(LossKind::Nll, 1e-30, 5), None).unwrap();
        assert_eq!(accuracy(&model, &ds).unwrap(), before);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = separable(40, &mut Rng::new(5));
        let run = || {
            let mut model = Model::mlp(2, &[6], 2, &mut Rng::new(6)).unwrap();
            let cfg = TrainConfig {
                batch_size: Some(7),
                seed: 11,
                ..TrainConfig::new(LossKind::Libra, 0.1, 10)
            };
            train(&ds, &mut model, &cfg, None).unwrap();
            model.flat_params()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_sample_loss_decreases_for_every_loss() {
        let mut rng = Rng::new(7);
        let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let y = LabelVector::from_indices(5, &[0, 2]).unwrap();
        let ds = Dataset::new(
            4,
            5,
            vec![Sample { x, y, y_true: Some(0) }],
            vec![],
            Provenance::manual(),
        )
        .unwrap();
        for kind in LossKind::ALL {
            let mut model = Model::mlp(4, &[6], 5, &mut Rng::new(8)).unwrap();
            let cfg = TrainConfig {
                params: LossParams::default(),
                ..TrainConfig::new(kind, 1e-3, 100)
            };
            let h = train(&ds, &mut model, &cfg, None).unwrap();
            let losses: Vec<f64> = h.records.iter().map(|r| r.train_loss).collect();
            assert!(losses.windows(2).all(|w| w[1] < w[0]), "{kind}: {losses:?}");
        }
    }

    fn fixed_model(rows: Vec<Vec<f64>>) -> Model {
        Model::from_theta(DenseMatrix::from_rows(&rows).unwrap()).unwrap()
    }

    fn one_hot_dataset(m: usize, truths: &[usize], allowed: &[&[usize]]) -> Dataset {
        let samples = truths
            .iter()
            .zip(allowed)
            .map(|(&t, a)| {
                let mut x = vec![0.0; m];
                x[t] = 1.0;
                Sample {
                    x,
                    y: LabelVector::from_indices(m, a).unwrap(),
                    y_true: Some(t),
                }
            })
            .collect();
        Dataset::new(m, m, samples, vec![], Provenance::manual()).unwrap()
    }

    #[test]
    fn confident_identity_model_is_exact() {
        // θ = 50·I makes the model essentially one-hot on its input.
        let m = 4;
        let rows = (0..m).map(|i| (0..m).map(|j| if i == j { 50.0 } else { 0.0 }).collect()).collect();
        let model = fixed_model(rows);
        let ds = one_hot_dataset(m, &[0, 1, 2, 3], &[&[0], &[1, 2], &[2], &[3, 0]]);
        assert_eq!(accuracy(&model, &ds).unwrap(), 1.0);
        let ds = ds.with_negatives(vec![LabelVector::from_indices(m, &[1]).unwrap()]).unwrap();
        assert!((p_neg(&model, &ds, ds.negatives()).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(hit_at_k(&model, &ds, 1, HitTarget::Forbidden).unwrap(), 0.25);
    }

    #[test]
    fn all_ones_labels_have_unit_p_pos() {
        let model = Model::softmax_regression(3, 3, &mut Rng::new(9)).unwrap();
        let ds = one_hot_dataset(3, &[0, 1], &[&[0, 1, 2], &[0, 1, 2]]);
        assert!((p_pos(&model, &ds).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(hit_at_k(&model, &ds, 3, HitTarget::Allowed).unwrap(), 1.0);
    }

    #[test]
    fn metric_contracts() {
        let model = Model::softmax_regression(3, 3, &mut Rng::new(10)).unwrap();
        let empty = Dataset::new(3, 3, vec![], vec![], Provenance::manual()).unwrap();
        assert!(accuracy(&model, &empty).is_err());
        let ds = one_hot_dataset(3, &[0], &[&[0]]);
        assert!(hit_at_k(&model, &ds, 0, HitTarget::Allowed).is_err());
        assert!(hit_at_k(&model, &ds, 4, HitTarget::Allowed).is_err());
        let no_truth = Dataset::new(
            3,
            3,
            vec![Sample {
                x: vec![1.0, 0.0, 0.0],
                y: LabelVector::from_indices(3, &[0]).unwrap(),
                y_true: None,
            }],
            vec![],
            Provenance::manual(),
        )
        .unwrap();
        assert!(accuracy(&model, &no_truth).is_err());
    }

    #[test]
    fn top_k_ties_go_to_lower_index() {
        assert_eq!(top_k(&[0.2, 0.3, 0.3, 0.2], 3), vec![1, 2, 0]);
    }

    #[test]
    fn sweep_contracts_and_errors() {
        let ds = separable(20, &mut Rng::new(12));
        let cfg = TrainConfig::new(LossKind::Nll, 0.1, 3);
        let factory = |s| Model::softmax_regression(2, 2, &mut Rng::new(s));
        assert!(sweep(&ds, factory, &cfg, &[1, 1], Some(0)).is_err());
        assert!(sweep(&ds, factory, &cfg, &[], Some(0)).is_err());
        let bad = |_| Model::softmax_regression(3, 2, &mut Rng::new(0));
        let rep = sweep(&ds, bad, &cfg, &[1, 2], Some(0)).unwrap();
        assert_eq!(rep.errors, 2);
        assert_eq!(rep.success_rate, Some(0.0));
        let rep = sweep(&ds, factory, &cfg, &[3, 4, 5], Some(ds.samples()[0].y_true.unwrap())).unwrap();
        assert_eq!(rep.outcomes.len(), 3);
        assert_eq!(rep.errors, 0);
    }

    #[test]
    fn non_finite_loss_names_step_and_sample() {
        // Strict nll cannot take the log of an allowed mass that underflows.
        let ds = one_hot_dataset(2, &[0, 1], &[&[0], &[1]]);
        let mut model = fixed_model(vec![vec![0.0, 800.0], vec![0.0, -800.0]]);
        let cfg = TrainConfig {
            params: LossParams::default(),
            shuffle: false,
            ..TrainConfig::new(LossKind::Nll, 1.0, 1)
        };
        match train(&ds, &mut model, &cfg, None) {
            Err(Error::NonFiniteLoss { step: 0, sample: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
