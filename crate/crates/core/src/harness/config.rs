use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::DatasetRef;
use super::sweep::SweepConfig;
use super::verify::SigpropTolerances;
use super::{HarnessError, Result};
use crate::arch::{ArchConfig, InitScheme};
use crate::nn::Mechanisms;
use crate::tensor::{Precision, ReductionMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Epochs at which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.03,
            momentum: 0.9,
            milestones: vec![60, 120, 160],
            decay: 0.2,
        }
    }
}

/// Replace one parameter's initial value after the architecture is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitOverride {
    pub param: String,
    pub scheme: InitScheme,
}

/// One JSON document describing a run over one or more seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub architecture: ArchConfig,
    #[serde(default)]
    pub init_overrides: Vec<InitOverride>,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub mechanisms: Mechanisms,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Stop after this many steps even if epochs remain.
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub dataset: Option<DatasetRef>,
    /// Held-out data. When absent, the last `test_size` examples of
    /// `dataset` are held out instead.
    #[serde(default)]
    pub test_dataset: Option<DatasetRef>,
    #[serde(default)]
    pub test_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_log_interval")]
    pub log_interval: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub save_checkpoint: bool,
    /// Checkpoint manifest read by the `metrics` subcommand.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub meanfield: Option<SweepConfig>,
    #[serde(default)]
    pub sigprop: SigpropTolerances,
}

fn default_epochs() -> usize {
    10
}

fn default_batch() -> usize {
    128
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_log_interval() -> u64 {
    50
}

impl ExperimentConfig {
    pub fn new(architecture: ArchConfig, dataset: Option<DatasetRef>) -> Self {
        Self {
            architecture,
            init_overrides: Vec::new(),
            precision: Precision::Single,
            mechanisms: Mechanisms::deterministic(),
            optimizer: OptimizerConfig::default(),
            epochs: default_epochs(),
            max_steps: None,
            batch_size: default_batch(),
            dataset,
            test_dataset: None,
            test_size: 0,
            seeds: default_seeds(),
            log_interval: default_log_interval(),
            output_dir: None,
            save_checkpoint: false,
            checkpoint: None,
            meanfield: None,
            sigprop: SigpropTolerances::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.log_interval < 1 {
            return bad("log_interval must be at least 1");
        }
        if !(0.0..1.0).contains(&self.mechanisms.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        Ok(())
    }

    /// The architecture with its seed replaced by `seed`.
    pub fn architecture_for(&self, seed: u64) -> ArchConfig {
        let mut arch = self.architecture.clone();
        match &mut arch {
            ArchConfig::ConstNet(c) => c.seed = seed,
            ArchConfig::LeakyNet(c) => c.seed = seed,
            ArchConfig::ReplicatedMlp(c) => c.seed = seed,
            ArchConfig::DeltaOrthogonal(c) => c.seed = seed,
        }
        arch
    }

    /// Mechanisms for one seed: dropout masks and shuffled reductions are
    /// keyed on the run seed.
    pub fn mechanisms_for(&self, seed: u64) -> Mechanisms {
        let mut m = self.mechanisms;
        m.seed = seed;
        if let ReductionMode::Shuffled { .. } = m.reduction {
            m.reduction = ReductionMode::Shuffled { seed };
        }
        m
    }
}

/// `--out`, then the config's `output_dir`, then `$SYMBREAK_OUT`, then `runs`.
pub fn resolve_output_dir(flag: Option<&Path>, cfg: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.map(Path::to_path_buf))
        .or_else(|| std::env::var_os("SYMBREAK_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}
