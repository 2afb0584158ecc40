use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use plab_core::datagen;
use plab_core::trainer::{self, TrainConfig};
use plab_core::{Dataset, LossKind, LossParams};

use super::{build_model, parse_loss, Arch, Outcome};
use crate::config;
use crate::output::{self, Provenance};

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepArgs {
    /// Dataset file [the built-in small consistent dataset].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Comma-separated losses [libra].
    #[arg(long, value_parser = parse_loss, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<Vec<LossKind>>,
    /// Number of seeds [200].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<u64>,
    /// First seed [0].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed_start: Option<u64>,
    /// [0.1]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// [500]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<Arch>,
    /// [50]
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[arg(skip)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<LossParams>,
    /// Success target [0 for the built-in dataset].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimal_output: Option<usize>,
    /// Exit with status 1 if any loss scores below this rate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn run(flags: SweepArgs) -> Result<Outcome> {
    let cfg = config::resolve(&flags, flags.config.as_deref())?;
    let (ds, optimal) = match &cfg.dataset {
        Some(p) => (
            Dataset::load(p).with_context(|| format!("loading dataset {}", p.display()))?,
            cfg.optimal_output,
        ),
        None => (datagen::gen_small_consistent(), Some(cfg.optimal_output.unwrap_or(0))),
    };
    let count = cfg.seeds.unwrap_or(200);
    if count == 0 {
        bail!("--seeds must be at least 1");
    }
    let start = cfg.seed_start.unwrap_or(0);
    let seeds: Vec<u64> = (start..start + count).collect();
    let arch = cfg.arch.unwrap_or_default();
    let hidden = cfg.hidden.clone().unwrap_or_else(|| vec![50]);
    let provenance = Provenance::new(&cfg, Some(start))?;
    let dir = output::output_dir(cfg.out_dir.as_deref())?;

    let mut reports = Vec::new();
    let mut below = false;
    for loss in cfg.loss.clone().unwrap_or_else(|| vec![LossKind::Libra]) {
        let epochs = cfg.epochs.unwrap_or(500);
        let tc = TrainConfig {
            loss,
            params: cfg.params.clone().unwrap_or_else(LossParams::training),
            learning_rate: cfg.lr.unwrap_or(0.1),
            epochs,
            batch_size: cfg.batch_size,
            weight_decay: cfg.weight_decay.unwrap_or(0.0),
            eval_every: epochs,
            ..TrainConfig::default()
        };
        let report = trainer::sweep(&ds, |s| build_model(arch, &hidden, ds.d(), ds.m(), s), &tc, &seeds, optimal)?;
        output::write_csv(&dir.join(format!("sweep_{loss}.csv")), &provenance, |w| report.write_csv(w))?;
        let rate = report.success_rate.map_or_else(|| "n/a".into(), |r| format!("{r:.3}"));
        println!("{loss}: success rate {rate} over {count} seeds, {} errors", report.errors);
        if let (Some(min), Some(r)) = (cfg.min_rate, report.success_rate) {
            below |= r < min;
        }
        reports.push(report);
    }
    output::write_json(
        &dir.join("sweep.json"),
        &json!({ "provenance": provenance, "config": cfg, "dataset": ds.provenance, "reports": reports }),
    )?;
    Ok(if below { Outcome::VerdictFail } else { Outcome::Success })
}
