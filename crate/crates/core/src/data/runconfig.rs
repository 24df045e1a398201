//! Training run configuration, loadable from JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synthetic::Task;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Environment variable supplying the default seed.
pub const SEED_ENV: &str = "CCAN_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup steps, then inverse square-root decay.
    pub warmup: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_every: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            warmup: 200,
            batch_size: 32,
            steps: 2000,
            eval_every: 250,
            clip: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        if self.warmup == 0 {
            return self.lr;
        }
        let w = self.warmup as f64;
        self.lr * (s / w).min((w / s).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub task: Option<Task>,
    pub train: PathBuf,
    pub valid: PathBuf,
    pub vocab: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Average the three best checkpoints into `avg.ckpt`.
    pub average_top3: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            task: None,
            train: PathBuf::from("data/train.jsonl"),
            valid: PathBuf::from("data/valid.jsonl"),
            vocab: PathBuf::from("data/vocab.txt"),
            out_dir: PathBuf::from("run"),
            seed: default_seed(),
            average_top3: false,
        }
    }
}

/// `CCAN_SEED` when set and numeric, else 1.
pub fn default_seed() -> u64 {
    std::env::var(SEED_ENV).ok().and_then(|s| s.parse().ok()).unwrap_or(1)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if o.batch_size == 0 || o.steps == 0 || o.eval_every == 0 {
            return Err(Error::Config("batch_size, steps and eval_every must be positive".into()));
        }
        if o.clip < 0.0 {
            return Err(Error::Config("clip must be non-negative".into()));
        }
        Ok(())
    }
}
