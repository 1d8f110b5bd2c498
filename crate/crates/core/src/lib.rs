//! Distilled transformer network for binary image-forgery detection: model, losses,
//! self-distillation chain, synthetic data, diagnostics and ablation variants.

pub mod config;
pub mod data;
pub mod diagnostics;
pub mod distill;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod train;
pub mod variants;

pub use config::{DtnConfig, LossWeights, RunConfig, VariantSpec};
pub use error::{DtnError, Result};
pub use model::{Dtn, ForwardOptions, Mode};
