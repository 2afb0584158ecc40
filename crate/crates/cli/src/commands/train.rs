use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use plab_core::numkit::{argmax, softmax};
use plab_core::trainer::{self, TrainConfig};
use plab_core::{Dataset, LossKind, LossParams, Model};

use super::{build_model, parse_loss, Arch, Outcome};
use crate::config;
use crate::output::{self, Provenance};

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Training dataset (JSON lines, as written by `gen`).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Held-out dataset for test accuracy.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// [libra]
    #[arg(long, value_parser = parse_loss)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    /// Learning rate [0.1].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// [500]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Mini-batch size; full batch when absent.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    /// Seeds both model initialization and batch order [0].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<Arch>,
    /// Hidden widths for the MLP [50].
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    /// Loss parameters (config file only).
    #[arg(skip)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<LossParams>,
    /// Output index expected to win on the first sample's input.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimal_output: Option<usize>,
    /// Also write the trained model.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<bool>,
    /// Output file prefix [the loss name].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn run(flags: TrainArgs) -> Result<Outcome> {
    let cfg = config::resolve(&flags, flags.config.as_deref())?;
    let Some(path) = &cfg.dataset else {
        bail!("--dataset is required");
    };
    let ds = Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
    let test = match &cfg.test {
        Some(p) => Some(Dataset::load(p).with_context(|| format!("loading test dataset {}", p.display()))?),
        None => None,
    };
    let loss = cfg.loss.unwrap_or(LossKind::Libra);
    let seed = cfg.seed.unwrap_or(0);
    let tc = TrainConfig {
        loss,
        params: cfg.params.clone().unwrap_or_else(LossParams::training),
        learning_rate: cfg.lr.unwrap_or(0.1),
        epochs: cfg.epochs.unwrap_or(500),
        batch_size: cfg.batch_size,
        weight_decay: cfg.weight_decay.unwrap_or(0.0),
        seed,
        ..TrainConfig::default()
    };
    let mut model = match &cfg.model {
        Some(p) => Model::load(p).with_context(|| format!("loading model {}", p.display()))?,
        None => build_model(cfg.arch.unwrap_or_default(), cfg.hidden.as_deref().unwrap_or(&[50]), ds.d(), ds.m(), seed)?,
    };
    if let Some(o) = cfg.optimal_output.filter(|&o| o >= ds.m()) {
        bail!("optimal output {o} out of range for m = {}", ds.m());
    }
    let history = trainer::train(&ds, &mut model, &tc, test.as_ref())?;

    let canonical = &ds.samples()[0].x;
    let p = softmax(&model.logits(canonical)?)?;
    let prediction = argmax(&p);
    let success = cfg.optimal_output.map(|o| o == prediction);
    let provenance = Provenance::new(&cfg, Some(seed))?;
    let dir = output::output_dir(cfg.out_dir.as_deref())?;
    let tag = cfg.tag.clone().unwrap_or_else(|| loss.to_string());

    output::write_csv(&dir.join(format!("{tag}_history.csv")), &provenance, |w| history.write_csv(w))?;
    let last = history.last().expect("training records the final epoch");
    output::write_json(
        &dir.join(format!("{tag}_metrics.json")),
        &json!({
            "provenance": provenance,
            "config": cfg,
            "dataset": ds.provenance,
            "metrics": {
                "epochs": last.epoch,
                "steps": history.steps,
                "train_loss": last.train_loss,
                "train_accuracy": last.train_accuracy,
                "test_accuracy": last.test_accuracy,
                "p_pos": last.p_pos,
                "p_neg": last.p_neg,
                "prediction": prediction,
                "prediction_probability": p[prediction],
                "success": success,
            },
        }),
    )?;
    if cfg.checkpoint.unwrap_or(false) {
        model.save(dir.join(format!("{tag}_model.json")))?;
    }
    let verdict = success.map_or_else(String::new, |s| format!(", success {s}"));
    println!(
        "{loss}: loss {:.6}, prediction {prediction} (p = {:.4}){verdict}",
        last.train_loss, p[prediction]
    );
    Ok(Outcome::Success)
}
