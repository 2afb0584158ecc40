use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use plab_core::propcheck::{self, GradSource};
use plab_core::{LabelVector, LossKind, LossParams, Rng};

use super::{parse_loss, Outcome};
use crate::config;
use crate::output::{self, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Property {
    /// Allowed-pair ratios preserved.
    Prp,
    /// Allowed-pair and disallowed-pair ratios preserved.
    Biprp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Central finite differences of the loss value.
    Fd,
    /// The library's analytic partials.
    Analytic,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckArgs {
    #[arg(long, value_parser = parse_loss)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    /// [prp]
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub property: Option<Property>,
    /// Number of outputs [10].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Allowed outputs, the first k indices [3].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Random interior points [200].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    /// Residual tolerance [1e-6].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    /// [0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// [fd]
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<Source>,
    #[arg(skip)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<LossParams>,
    /// Report file [<out-dir>/check_<loss>_<property>.json].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn run(flags: CheckArgs) -> Result<Outcome> {
    let cfg = config::resolve(&flags, flags.config.as_deref())?;
    let Some(loss) = cfg.loss else {
        bail!("--loss is required");
    };
    let property = cfg.property.unwrap_or(Property::Prp);
    let tol = cfg.tol.unwrap_or(1e-6);
    if !(tol > 0.0 && tol.is_finite()) {
        bail!("tolerance must be positive, got {tol}");
    }
    let (m, k) = (cfg.m.unwrap_or(10), cfg.k.unwrap_or(3));
    let bi = property == Property::Biprp;
    let nontrivial = k >= 2 || (bi && m >= k + 2);
    if k == 0 || k > m || !nontrivial {
        bail!("k = {k} of m = {m} leaves no pair of outputs to compare");
    }
    let y = LabelVector::from_indices(m, &(0..k).collect::<Vec<_>>())?;
    let params = cfg.params.clone().unwrap_or_default();
    let source = match cfg.source.unwrap_or(Source::Fd) {
        Source::Fd => GradSource::FiniteDifference,
        Source::Analytic => GradSource::Analytic,
    };
    let seed = cfg.seed.unwrap_or(0);
    let mut rng = Rng::new(seed);
    let report = propcheck::check_builtin(loss, &params, &y, cfg.points.unwrap_or(200), source, bi, tol, &mut rng)?;

    let provenance = Provenance::new(&cfg, Some(seed))?;
    let name = format!("check_{loss}_{}.json", if bi { "biprp" } else { "prp" });
    let path = match &cfg.out {
        Some(p) => p.clone(),
        None => output::output_dir(cfg.out_dir.as_deref())?.join(name),
    };
    output::write_json(&path, &json!({ "provenance": provenance, "config": cfg, "report": report }))?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".into(), |v| format!("{v:.3e}"));
    println!(
        "{loss} {}: {} (allowed {}, disallowed {}, tol {tol:e})",
        if bi { "biprp" } else { "prp" },
        if report.pass { "pass" } else { "FAIL" },
        fmt(report.allowed),
        fmt(report.disallowed)
    );
    Ok(if report.pass { Outcome::Success } else { Outcome::VerdictFail })
}
