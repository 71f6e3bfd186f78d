//! Experiment orchestration: datasets, training runs with metric logging,
//! verifier suites, mean-field sweeps and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod sweep;
pub mod train;
pub mod verify;

use std::path::Path;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest};
pub use config::{resolve_output_dir, ExperimentConfig, InitOverride, OptimizerConfig};
pub use data::{
    gen_synthetic_shift, gen_synthetic_shift_with, load_cifar_binary, load_idx, Dataset, DatasetKind, DatasetRef,
    ShiftOptions,
};
pub use sweep::{run_meanfield_sweep, write_sweep_csv, SweepConfig, SweepRow};
pub use train::{build_model, evaluate, run_training, train_seed, MetricsLog, RunSummary};
pub use verify::{
    probe_batch, verify_ntk, verify_sigprop, Check, CheckStatus, NtkReport, SigpropReport, SigpropTolerances,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Arch(#[from] crate::arch::ArchError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    MeanField(#[from] crate::meanfield::MeanFieldError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        HarnessError::Io(format!("{}: {e}", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
