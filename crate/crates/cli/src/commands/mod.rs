pub mod check;
pub mod dynamics;
pub mod gen;
pub mod noise;
pub mod sweep;
pub mod train;

use std::str::FromStr;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use plab_core::{Architecture, LossKind, Model, Rng};

/// How a subcommand ended when it did not error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    VerdictFail,
}

pub fn parse_loss(s: &str) -> Result<LossKind, String> {
    LossKind::from_str(s).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    SoftmaxRegression,
    #[default]
    Mlp,
}

/// Glorot-initialized model sized for a dataset.
pub fn build_model(arch: Arch, hidden: &[usize], d: usize, m: usize, seed: u64) -> plab_core::Result<Model> {
    let architecture = match arch {
        Arch::SoftmaxRegression => Architecture::SoftmaxRegression { inputs: d, outputs: m },
        Arch::Mlp => Architecture::Mlp {
            inputs: d,
            hidden: hidden.to_vec(),
            outputs: m,
        },
    };
    Model::init(architecture, &mut Rng::new(seed))
}
