use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use plab_core::dynamics::{self, DynamicsConfig, StopRule, AB_AC_STARTS, AB_STARTS};
use plab_core::{LabelVector, LossKind, LossParams, Rng};

use super::{parse_loss, Outcome};
use crate::config;
use crate::output::{self, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// One sample `{A, B}`, three starts, stop when `p_C < 1e-4`.
    Ab,
    /// Samples `{A, B}` and `{A, C}`, three starts, stop when `p_A > 0.9999`.
    AbAc,
}

/// Allowed output indices, written `0,2,5`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IndexSet(pub Vec<usize>);

impl FromStr for IndexSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|e| format!("bad index {t:?}: {e}")))
            .collect::<Result<_, _>>()
            .map(IndexSet)
    }
}

/// `above:INDEX:THRESHOLD`, `below:INDEX:THRESHOLD` or `grad:EPS`.
fn parse_stop(s: &str) -> Result<StopRule, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |t: &str| t.parse::<f64>().map_err(|e| format!("bad number {t:?}: {e}"));
    let idx = |t: &str| t.parse::<usize>().map_err(|e| format!("bad index {t:?}: {e}"));
    match parts.as_slice() {
        ["above", i, t] => Ok(StopRule::ProbAbove { index: idx(i)?, threshold: num(t)? }),
        ["below", i, t] => Ok(StopRule::ProbBelow { index: idx(i)?, threshold: num(t)? }),
        ["grad", e] => Ok(StopRule::GradNormBelow { eps: num(e)? }),
        _ => Err(format!("stop rule {s:?} is not above:I:T, below:I:T or grad:EPS")),
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsArgs {
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    /// [libra]
    #[arg(long, value_parser = parse_loss)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    /// [1.0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Maximum number of steps [10000].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// Number of outputs (implied by --start or --logits).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// One allowed set per sample; repeat the flag for several samples.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<IndexSet>>,
    /// Starting probabilities, comma-separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<f64>>,
    /// Starting logits, comma-separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
    /// Seed for N(0, 1) starting logits when no start is given [0].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Stop rule; repeatable.
    #[arg(long, value_parser = parse_stop)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<StopRule>>,
    /// [1]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_every: Option<usize>,
    /// Also dump the vector field on a simplex grid of this resolution (m = 3).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<usize>,
    #[arg(skip)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<LossParams>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

enum Start {
    Probs(Vec<f64>),
    Logits(Vec<f64>),
}

pub fn run(flags: DynamicsArgs) -> Result<Outcome> {
    let cfg = config::resolve(&flags, flags.config.as_deref())?;
    let (preset_labels, preset_starts, preset_stop): (Vec<IndexSet>, Vec<Start>, Vec<StopRule>) = match cfg.preset {
        Some(Preset::Ab) => (
            vec![IndexSet(vec![0, 1])],
            AB_STARTS.iter().map(|p| Start::Probs(p.to_vec())).collect(),
            vec![StopRule::ProbBelow { index: 2, threshold: 1e-4 }],
        ),
        Some(Preset::AbAc) => (
            vec![IndexSet(vec![0, 1]), IndexSet(vec![0, 2])],
            AB_AC_STARTS.iter().map(|p| Start::Probs(p.to_vec())).collect(),
            vec![StopRule::ProbAbove { index: 0, threshold: 0.9999 }],
        ),
        None => (Vec::new(), Vec::new(), Vec::new()),
    };

    let starts = match (&cfg.start, &cfg.logits) {
        (Some(_), Some(_)) => bail!("give --start or --logits, not both"),
        (Some(p), None) => vec![Start::Probs(p.clone())],
        (None, Some(z)) => vec![Start::Logits(z.clone())],
        (None, None) if !preset_starts.is_empty() => preset_starts,
        (None, None) => {
            let Some(m) = cfg.m.or(cfg.preset.map(|_| 3)) else {
                bail!("need --m, --start, --logits or --preset");
            };
            let mut rng = Rng::new(cfg.seed.unwrap_or(0));
            vec![Start::Logits((0..m).map(|_| rng.normal()).collect())]
        }
    };
    let z0s: Vec<Vec<f64>> = starts
        .into_iter()
        .map(|s| match s {
            Start::Probs(p) => dynamics::logits_from_probs(&p),
            Start::Logits(z) => Ok(z),
        })
        .collect::<plab_core::Result<_>>()?;
    let m = z0s[0].len();
    if cfg.m.is_some_and(|v| v != m) {
        bail!("--m = {} does not match the {m}-dimensional start", cfg.m.unwrap_or(0));
    }

    let sets = cfg.labels.clone().unwrap_or(preset_labels);
    if sets.is_empty() {
        bail!("at least one --labels set is required");
    }
    let labels = sets
        .iter()
        .map(|s| LabelVector::from_indices(m, &s.0))
        .collect::<plab_core::Result<Vec<_>>>()?;

    let loss = cfg.loss.unwrap_or(LossKind::Libra);
    let dc = DynamicsConfig {
        loss,
        params: cfg.params.clone().unwrap_or_default(),
        learning_rate: cfg.lr.unwrap_or(1.0),
        max_steps: cfg.steps.unwrap_or(10_000),
        stop: cfg.stop.clone().unwrap_or(preset_stop),
        record_every: cfg.record_every.unwrap_or(1),
    };
    dc.validate(m)?;

    let provenance = Provenance::new(&cfg, cfg.seed)?;
    let dir = output::output_dir(cfg.out_dir.as_deref())?;
    let mut runs = Vec::new();
    for (i, z0) in z0s.iter().enumerate() {
        let traj = dynamics::simulate(z0, &labels, &dc)?;
        output::write_csv(&dir.join(format!("trajectory_{i}.csv")), &provenance, |w| traj.write_csv(w))?;
        let last = traj.last();
        println!(
            "start {i}: {} steps, final p = [{}]",
            traj.steps(),
            last.p.iter().take(8).map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ")
        );
        runs.push(json!({
            "start_p": traj.first().p,
            "termination": traj.termination,
            "steps": traj.steps(),
            "final_p": last.p,
            "final_loss": last.loss,
        }));
    }
    if let Some(res) = cfg.field {
        if m != 3 {
            bail!("vector fields are only defined for m = 3");
        }
        let field = dynamics::vector_field(loss, &labels, &dc.params, res)?;
        output::write_csv(&dir.join("field.csv"), &provenance, |w| dynamics::write_field_csv(&field, w))?;
    }
    output::write_json(
        &dir.join("dynamics.json"),
        &json!({ "provenance": provenance, "config": cfg, "runs": runs }),
    )?;
    Ok(Outcome::Success)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_rules_parse() {
        assert_eq!(parse_stop("below:2:1e-4").unwrap(), StopRule::ProbBelow { index: 2, threshold: 1e-4 });
        assert_eq!(parse_stop("above:0:0.9999").unwrap(), StopRule::ProbAbove { index: 0, threshold: 0.9999 });
        assert_eq!(parse_stop("grad:1e-8").unwrap(), StopRule::GradNormBelow { eps: 1e-8 });
        assert!(parse_stop("below:2").is_err());
        assert!(parse_stop("sideways:1:0.5").is_err());
    }

    #[test]
    fn index_sets_parse() {
        assert_eq!("0, 2,5".parse::<IndexSet>().unwrap(), IndexSet(vec![0, 2, 5]));
        assert!("0,x".parse::<IndexSet>().is_err());
    }
}
