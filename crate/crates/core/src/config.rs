//! Run configuration, read from TOML.
//!
//! Scalars sit at the top level; `[field]`, `[solver]`, `[reward]` and
//! `[ppo]` hold the sub-configurations. Every key is optional and unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, RewardConfig, DEFAULT_STEP_CAP};
use crate::field_gen::FieldConfig;
use crate::flow_sim::SolverConfig;
use crate::ppo::PpoConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Write a checkpoint every this many batches (the final one is always written).
    pub checkpoint_every: usize,
    /// Greedy evaluation episodes run after training.
    pub eval_episodes: usize,
    /// Threads used to collect the episodes of a batch.
    pub workers: usize,
    /// Control steps after which an episode is cut off with score 0.
    pub step_cap: usize,
    pub field: FieldConfig,
    pub solver: SolverConfig,
    pub reward: RewardConfig,
    pub ppo: PpoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 10,
            eval_episodes: 50,
            workers: 1,
            step_cap: DEFAULT_STEP_CAP,
            field: FieldConfig::default(),
            solver: SolverConfig::default(),
            reward: RewardConfig::default(),
            ppo: PpoConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigParse(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.env().validate()?;
        self.ppo.validate()?;
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        Ok(())
    }

    pub fn env(&self) -> EnvConfig {
        EnvConfig {
            field: self.field.clone(),
            solver: self.solver.clone(),
            reward: self.reward.clone(),
            step_cap: self.step_cap,
        }
    }
}
