//! Maximum-likelihood training.

pub mod adam;
pub mod data;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use adam::{adam_step, clip_grad_norm, grad_norm, AdamState};
pub use data::{crop_length, make_batch, make_synthetic_dataset, Batch, SyntheticClip};
pub use trainer::{
    PlateauState, StepMetrics, TrainState, Trainer, MAX_NON_FINITE_STEPS, MIN_ABS_MIXING_DET,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub clip_seconds: f64,
    pub lr: f64,
    pub lr_plateau: f64,
    /// Evaluations without improvement before the learning rate drops.
    pub plateau_patience: usize,
    /// Steps between validation evaluations.
    pub eval_every: u64,
    /// Steps between metrics lines.
    pub log_every: u64,
    /// Steps between checkpoints (a final one is always written).
    pub checkpoint_every: u64,
    pub max_steps: u64,
    pub seed: u64,
    pub grad_clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            clip_seconds: 1.0,
            lr: 1e-4,
            lr_plateau: 5e-5,
            plateau_patience: 5,
            eval_every: 500,
            log_every: 100,
            checkpoint_every: 10_000,
            max_steps: 600_000,
            seed: 0,
            grad_clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    /// Settings for the desk-scale model: a few hundred steps at a larger
    /// learning rate.
    pub fn tiny() -> Self {
        Self {
            lr: 1e-3,
            lr_plateau: 5e-4,
            eval_every: 100,
            log_every: 10,
            checkpoint_every: 500,
            max_steps: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr > self.lr_plateau && self.lr_plateau > 0.0) {
            return Err(Error::config(format!(
                "need lr > lr_plateau > 0, got lr {} and lr_plateau {}",
                self.lr, self.lr_plateau
            )));
        }
        if !(self.clip_seconds > 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::config(
                "clip_seconds and grad_clip_norm must be positive",
            ));
        }
        if self.eval_every == 0 || self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::config(
                "eval_every, log_every and checkpoint_every must be positive",
            ));
        }
        Ok(())
    }
}
