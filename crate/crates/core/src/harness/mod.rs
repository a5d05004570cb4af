//! Pretraining, probing and ablation runs wired through the five stages.

pub mod config;
mod model;
mod pretrain;
mod probe;

use std::path::PathBuf;

pub use config::{
    parse_config, parse_config_over, DataConfig, ExtractionConfig, Precision, Preset, ProbeConfig, RunConfig, SimilarityKind,
};
pub use model::Model;
pub use pretrain::{pretrain, read_steps, PretrainOptions, PretrainReport};
pub use probe::{probe, probe_features, ProbeReport};

use crate::augment::AugmentError;
use crate::data::{make_synthetic, DataError, Dataset};
use crate::encoder::EncoderError;
use crate::extraction::ExtractionError;
use crate::simloss::LossError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("training diverged at epoch {epoch}, step {step}: {msg}")]
    Diverged { epoch: usize, step: u64, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("probe: {0}")]
    Probe(String),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}

/// The synthetic dataset a config describes.
pub fn dataset_for(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    Ok(make_synthetic(d.n, d.classes, d.channels, d.size, d.size, d.nuisance, d.seed)?)
}
