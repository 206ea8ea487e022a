//! Run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::BootstrapConfig;
use crate::model::ModelConfig;
use crate::phantom::{read_file, DatasetConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub bootstrap_replicas: usize,
    pub alpha: f64,
    pub permutation_replicates: usize,
    pub seed: u64,
    /// Worker threads for per-case inference.
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bootstrap_replicas: 1000,
            alpha: 0.05,
            permutation_replicates: 10_000,
            seed: 0,
            jobs: 1,
        }
    }
}

impl EvalConfig {
    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            replicas: self.bootstrap_replicas,
            alpha: self.alpha,
            seed: self.seed,
            ..BootstrapConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bootstrap_replicas < 100 {
            return Err(Error::Config("eval.bootstrap_replicas must be at least 100".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("eval.alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.permutation_replicates == 0 || self.jobs == 0 {
            return Err(Error::Config("eval.permutation_replicates and eval.jobs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    /// Parses and validates a JSON config; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
