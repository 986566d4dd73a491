//! JSON configuration documents for the command-line interface. Every
//! document rejects unknown fields so typos fail loudly instead of silently
//! using defaults.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::longtail::LongTailSpec;
use crate::optim::TrainConfig;

/// `train` command: one optimization run over a synthetic long-tail dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub data: LongTailSpec,
    pub h: usize,
    pub train: TrainConfig,
}

/// `compare` command: two runs over the same dataset spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareCommandConfig {
    pub data: LongTailSpec,
    pub h: usize,
    pub run_a: TrainConfig,
    pub run_b: TrainConfig,
}

/// `check-bounds` command: Monte Carlo slack verification of the three
/// lower bounds on random configurations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckBoundsConfig {
    pub trials: usize,
    pub max_n: usize,
    pub max_h: usize,
    pub max_k: usize,
    pub seed: u64,
    /// Debug hook: corrupts computed losses by this additive amount before
    /// slack checks, to prove the checker can fail. Only honored in debug
    /// builds; release builds reject a nonzero value.
    #[serde(default)]
    pub corrupt_loss: f64,
}

impl CheckBoundsConfig {
    /// `trials == 0` is legal and yields an empty report.
    pub fn validate(&self) -> Result<()> {
        if self.max_n < 2 || self.max_h < 2 || self.max_k < 2 {
            return Err(Error::Config(
                "max_n, max_h, max_k must all be >= 2".into(),
            ));
        }
        if self.max_k > self.max_n {
            return Err(Error::Config(format!(
                "max_k ({}) must not exceed max_n ({})",
                self.max_k, self.max_n
            )));
        }
        if cfg!(not(debug_assertions)) && self.corrupt_loss != 0.0 {
            return Err(Error::Config(
                "corrupt_loss is a debug-build-only hook".into(),
            ));
        }
        Ok(())
    }
}

/// `check-grads` command: finite-difference validation of the analytic
/// gradients on random configurations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckGradsConfig {
    pub trials: usize,
    pub max_n: usize,
    pub max_h: usize,
    pub max_k: usize,
    pub seed: u64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default = "default_max_rel_err")]
    pub max_rel_err: f64,
}

fn default_fd_step() -> f64 {
    1e-5
}

fn default_max_rel_err() -> f64 {
    1e-4
}

impl CheckGradsConfig {
    /// `trials == 0` is legal and passes vacuously.
    pub fn validate(&self) -> Result<()> {
        if self.max_n < 2 || self.max_h < 2 || self.max_k < 2 {
            return Err(Error::Config(
                "max_n, max_h, max_k must all be >= 2".into(),
            ));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::Config(format!(
                "fd_step must be > 0 (got {})",
                self.fd_step
            )));
        }
        if !(self.max_rel_err > 0.0) {
            return Err(Error::Config(format!(
                "max_rel_err must be > 0 (got {})",
                self.max_rel_err
            )));
        }
        Ok(())
    }
}
