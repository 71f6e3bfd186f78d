//! Tools for studying weight symmetry in neural networks: a small
//! deterministic training engine with controllable reduction order, networks
//! whose initialisation keeps every channel identical, correlation metrics on
//! weights and features, and mean-field correlation dynamics.

pub mod arch;
pub mod harness;
pub mod meanfield;
pub mod metrics;
pub mod nn;
pub mod tensor;
