use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use plab_core::datagen::{self, DistractorPoolSpec, NoiseMatrix};
use plab_core::{Dataset, Rng};

use super::Outcome;
use crate::config;
use crate::output::{self, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    SmallConsistent,
    LargeConsistent,
    NoiseCase,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenArgs {
    #[arg(value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<Generator>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Number of samples [large-consistent: 10000, noise-case: 1000].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Input dimension [large-consistent: 50, noise-case: 10].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    /// Number of outputs [large-consistent: 20].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Distractor pool fraction [0.5].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rdpool: Option<f64>,
    /// Distractor co-occurrence fraction [0.5].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rdocc: Option<f64>,
    /// Cluster standard deviation [1.0].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Built-in noise case 1..=5.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub case: Option<usize>,
    /// Noise matrix CSV, instead of --case.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matrix: Option<PathBuf>,
    /// Dataset file [<out-dir>/dataset.jsonl].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// JSON or TOML file with any of the fields above.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn run(flags: GenArgs) -> Result<Outcome> {
    let cfg = config::resolve(&flags, flags.config.as_deref())?;
    let Some(generator) = cfg.generator else {
        bail!("no generator given (small-consistent, large-consistent or noise-case)");
    };
    let seed = cfg.seed.unwrap_or(0);
    let mut rng = Rng::new(seed);
    let mut ds = match generator {
        Generator::SmallConsistent => {
            let sized = [cfg.n, cfg.d, cfg.m].iter().any(Option::is_some);
            if sized || cfg.rdpool.is_some() || cfg.rdocc.is_some() || cfg.sigma.is_some() {
                bail!("small-consistent has fixed size and takes no generator parameters");
            }
            datagen::gen_small_consistent()
        }
        Generator::LargeConsistent => {
            let spec = DistractorPoolSpec {
                r_dpool: cfg.rdpool.unwrap_or(0.5),
                r_docc: cfg.rdocc.unwrap_or(0.5),
            };
            let (n, d, m) = (cfg.n.unwrap_or(10_000), cfg.d.unwrap_or(50), cfg.m.unwrap_or(20));
            datagen::gen_large_consistent(n, d, m, &spec, cfg.sigma.unwrap_or(1.0), &mut rng)?
        }
        Generator::NoiseCase => noise_case(&cfg, &mut rng)?,
    };
    let provenance = Provenance::new(&cfg, Some(seed))?;
    if let Some(params) = ds.provenance.params.as_object_mut() {
        params.insert("plab".into(), serde_json::to_value(&provenance)?);
    }
    ds.provenance.seed = seed;
    let path = match &cfg.out {
        Some(p) => p.clone(),
        None => output::output_dir(cfg.out_dir.as_deref())?.join("dataset.jsonl"),
    };
    ds.save(&path)?;
    let mean_k = ds.samples().iter().map(|s| s.y.k() as f64).sum::<f64>() / ds.n().max(1) as f64;
    println!(
        "wrote {} (n={}, d={}, m={}, mean distractors {:.4})",
        path.display(),
        ds.n(),
        ds.d(),
        ds.m(),
        mean_k - 1.0
    );
    Ok(Outcome::Success)
}

fn noise_case(cfg: &GenArgs, rng: &mut Rng) -> Result<Dataset> {
    let (noise, source) = match (cfg.case, &cfg.matrix) {
        (Some(c), None) => (datagen::builtin_case_matrix(c)?, json!(c)),
        (None, Some(p)) => (NoiseMatrix::load(p)?, json!(p.display().to_string())),
        _ => bail!("noise-case needs exactly one of --case or --matrix"),
    };
    let m = noise.m();
    if cfg.m.is_some_and(|v| v != m) {
        bail!("--m conflicts with the {m}x{m} noise matrix");
    }
    let (n, d) = (cfg.n.unwrap_or(1000), cfg.d.unwrap_or(10));
    // Clean clusters first: a pool of size one holds only the true label.
    let clean_spec = DistractorPoolSpec {
        r_dpool: 1.0 / m as f64,
        r_docc: 0.0,
    };
    let clean = datagen::gen_large_consistent(n, d, m, &clean_spec, cfg.sigma.unwrap_or(1.0), rng)?;
    let mut ds = datagen::apply_noise(&clean, &noise, rng)?;
    ds.provenance.generator = "noise_case".into();
    ds.provenance.params = json!({ "n": n, "d": d, "m": m, "noise": source });
    Ok(ds)
}
