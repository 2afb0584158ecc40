use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use plab_core::datagen::{self, NoiseMatrix};

use super::Outcome;
use crate::config;
use crate::output::{self, Provenance};

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseArgs {
    /// Built-in case 1..=5.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub case: Option<usize>,
    /// Validate and summarize this CSV matrix instead.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn run(flags: NoiseArgs) -> Result<Outcome> {
    let cfg = config::resolve(&flags, flags.config.as_deref())?;
    let (noise, stem) = match (cfg.case, &cfg.file) {
        (Some(c), None) => (datagen::builtin_case_matrix(c)?, format!("noise_case{c}")),
        (None, Some(p)) => (NoiseMatrix::load(p)?, "noise_matrix".to_string()),
        _ => bail!("give exactly one of --case or --file"),
    };
    let provenance = Provenance::new(&cfg, None)?;
    let dir = output::output_dir(cfg.out_dir.as_deref())?;
    output::write_csv(&dir.join(format!("{stem}.csv")), &provenance, |w| noise.write_csv(w))?;
    let expected = noise.expected_distractors();
    output::write_json(
        &dir.join(format!("{stem}.json")),
        &json!({ "provenance": provenance, "config": cfg, "m": noise.m(), "expected_distractors": expected }),
    )?;
    let mean = expected.iter().sum::<f64>() / expected.len() as f64;
    println!("{stem}: m = {}, mean expected distractors {mean:.4}", noise.m());
    Ok(Outcome::Success)
}
