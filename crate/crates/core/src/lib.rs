//! Numerical laboratory for partial-label (disjunctive) supervision.
//!
//! The crate provides the loss family with exact logit gradients
//! ([`losses`]), softmax regression and MLP models ([`models`]), logit-level
//! gradient dynamics ([`dynamics`]), synthetic dataset generators
//! ([`datagen`]), a training loop with evaluation metrics ([`trainer`]) and
//! finite-difference / residual checks of the ratio-preservation properties
//! ([`propcheck`]).

pub mod datagen;
pub mod dynamics;
pub mod error;
pub mod label;
pub mod losses;
pub mod models;
pub mod numkit;
pub mod propcheck;
pub mod trainer;

pub use datagen::{Dataset, Sample};
pub use error::{Error, Result};
pub use label::LabelVector;
pub use losses::{LossKind, LossParams, LossResult};
pub use models::{Architecture, Model};
pub use numkit::{DenseMatrix, Rng};
