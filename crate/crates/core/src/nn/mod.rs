//! Layers, networks, forward and backward passes, and the optimiser.

mod dropout;
mod loss;
mod network;
mod optim;
mod spec;

use thiserror::Error;

pub use dropout::{apply_dropout, dropout_mask};
pub use loss::{accuracy, softmax_cross_entropy};
pub use network::{BnRunning, ForwardPass, Gradients, Mechanisms, Mode, Network, NodeInfo, NodeKind, Param, ParamRole};
pub use optim::{lr_schedule, sgd_momentum_step};
pub use spec::{LayerSpec, NetworkSpec};

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("activations from step {pass} used at network step {network}")]
    StaleActivations { pass: u64, network: u64 },
    #[error("non-finite value in parameter {0}")]
    NonFinite(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NnError>;
