//! The training loop.

use std::fmt;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, clip_grad_norm, AdamState};
use super::data::{make_batch, Batch};
use super::TrainConfig;
use crate::flow::MelGlow;
use crate::frontend::Waveform;
use crate::params::ParamSet;
use crate::predictor::Mode;
use crate::{Error, Real, Result};

/// Training aborts after this many consecutive non-finite losses.
pub const MAX_NON_FINITE_STEPS: u32 = 3;
/// Updates leaving any mixing matrix with a smaller `|det|` are rejected.
pub const MIN_ABS_MIXING_DET: f64 = 1e-12;
/// Stream offset separating the validation crops from training crops.
const VALIDATION_STREAM: u64 = u64::MAX;

/// Learning-rate plateau detector.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauState {
    pub best: f64,
    pub bad_evals: usize,
}

impl Default for PlateauState {
    fn default() -> Self {
        Self {
            best: f64::INFINITY,
            bad_evals: 0,
        }
    }
}

impl PlateauState {
    /// Record a validation loss; returns `true` once `patience` evaluations
    /// in a row failed to improve on the best one.
    pub fn observe(&mut self, loss: f64, patience: usize) -> bool {
        if loss < self.best {
            self.best = loss;
            self.bad_evals = 0;
        } else {
            self.bad_evals += 1;
        }
        self.bad_evals >= patience
    }
}

/// Loop bookkeeping that has to survive a checkpoint/resume cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed steps.
    pub step: u64,
    pub lr: f64,
    pub plateau: PlateauState,
    pub non_finite_streak: u32,
    pub rejected_steps: u64,
}

impl TrainState {
    pub fn new(lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            plateau: PlateauState::default(),
            non_finite_streak: 0,
            rejected_steps: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    /// Per-element NLL in nats of the step's batch.
    pub nll: f64,
    pub bpd: f64,
    pub gnorm: f64,
    pub lr: f64,
}

impl fmt::Display for StepMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} nll={} bpd={} gnorm={} lr={}",
            self.step, self.nll, self.bpd, self.gnorm, self.lr
        )
    }
}

impl StepMetrics {
    /// Parse a metrics line written by [`Display`](fmt::Display).
    pub fn parse(line: &str) -> Option<Self> {
        let mut fields = line.split_whitespace().map(|kv| kv.split_once('='));
        let mut next = |key: &str| -> Option<&str> {
            let (k, v) = fields.next()??;
            (k == key).then_some(v)
        };
        Some(Self {
            step: next("step")?.parse().ok()?,
            nll: next("nll")?.parse().ok()?,
            bpd: next("bpd")?.parse().ok()?,
            gnorm: next("gnorm")?.parse().ok()?,
            lr: next("lr")?.parse().ok()?,
        })
    }
}

pub struct Trainer<T> {
    pub model: MelGlow<T>,
    pub adam: AdamState<T>,
    pub config: TrainConfig,
    pub state: TrainState,
    data: Vec<Waveform>,
    validation: Batch<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(
        model: MelGlow<T>,
        config: TrainConfig,
        data: Vec<Waveform>,
        validation: &[Waveform],
    ) -> Result<Self> {
        let adam = AdamState::new(model.num_params());
        let state = TrainState::new(config.lr);
        Self::resume(model, adam, state, config, data, validation)
    }

    /// Continue from saved optimizer and loop state.
    pub fn resume(
        model: MelGlow<T>,
        adam: AdamState<T>,
        state: TrainState,
        config: TrainConfig,
        data: Vec<Waveform>,
        validation: &[Waveform],
    ) -> Result<Self> {
        config.validate()?;
        if adam.m.len() != model.num_params() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} entries, model has {} parameters",
                adam.m.len(),
                model.num_params()
            )));
        }
        let mut rng = Self::rng(config.seed, VALIDATION_STREAM);
        let validation = make_batch(
            validation,
            config.batch_size,
            config.clip_seconds,
            &model.config.stft,
            &mut rng,
        )?;
        Ok(Self {
            model,
            adam,
            config,
            state,
            data,
            validation,
        })
    }

    fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng
    }

    /// Crops used by step `step` (1-based); a pure function of the seed, the
    /// step and the dataset.
    pub fn batch_for_step(&self, step: u64) -> Result<Batch<T>> {
        let mut rng = Self::rng(self.config.seed, step);
        make_batch(
            &self.data,
            self.config.batch_size,
            self.config.clip_seconds,
            &self.model.config.stft,
            &mut rng,
        )
    }

    /// Eval-mode NLL on the fixed validation crops.
    pub fn evaluate(&self) -> Result<f64> {
        self.model
            .batch_nll(&self.validation.waves, &self.validation.mels, Mode::Eval)
    }

    /// One optimisation step.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.state.step + 1;
        let batch = self.batch_for_step(step)?;
        let result = match self.model.loss_and_grad(&batch.waves, &batch.mels) {
            Ok(g) if g.loss.is_finite() => Some(g),
            Ok(_) | Err(Error::Numeric(_)) => None,
            Err(e) => return Err(e),
        };
        self.state.step = step;
        let Some(mut bg) = result else {
            self.state.non_finite_streak += 1;
            log::warn!("step {step}: non-finite loss, update skipped");
            if self.state.non_finite_streak >= MAX_NON_FINITE_STEPS {
                return Err(Error::Numeric(format!(
                    "loss was non-finite for {MAX_NON_FINITE_STEPS} consecutive steps (last at step {step})"
                )));
            }
            return Ok(StepMetrics {
                step,
                nll: f64::NAN,
                bpd: f64::NAN,
                gnorm: f64::NAN,
                lr: self.state.lr,
            });
        };
        self.state.non_finite_streak = 0;
        let gnorm = clip_grad_norm(&mut bg.grad, self.config.grad_clip_norm);

        let before = self.model.flat_params();
        let adam_before = self.adam.clone();
        if adam_step(&mut self.model, &bg.grad, &mut self.adam, self.state.lr) {
            if self.model.min_abs_mixing_det() < MIN_ABS_MIXING_DET {
                log::warn!("step {step}: update made a mixing matrix singular, rejected");
                self.model.set_flat_params(&before);
                self.adam = adam_before;
                self.state.rejected_steps += 1;
            } else {
                self.model.commit_running_stats(&bg.predictor_caches);
            }
        }

        if step.is_multiple_of(self.config.eval_every) {
            let val = self.evaluate()?;
            log::info!("step {step}: validation nll {val:.6}");
            if self
                .state
                .plateau
                .observe(val, self.config.plateau_patience)
                && self.state.lr > self.config.lr_plateau
            {
                log::info!(
                    "step {step}: validation plateaued, lr {} → {}",
                    self.state.lr,
                    self.config.lr_plateau
                );
                self.state.lr = self.config.lr_plateau;
            }
        }
        Ok(StepMetrics {
            step,
            nll: bg.loss,
            bpd: bg.loss / std::f64::consts::LN_2,
            gnorm,
            lr: self.state.lr,
        })
    }

    /// Step until `config.max_steps`, handing every step's metrics to
    /// `on_step`.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&Self, &StepMetrics) -> Result<()>,
    ) -> Result<()> {
        while self.state.step < self.config.max_steps {
            let m = self.step()?;
            on_step(self, &m)?;
        }
        Ok(())
    }
}
