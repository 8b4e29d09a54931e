//! Flow architecture hyperparameters and named presets.

use serde::{Deserialize, Serialize};

use crate::frontend::StftConfig;
use crate::predictor::{KernelPredictorConfig, KernelTarget};
use crate::{Error, Result};

/// Largest magnitude of the log-scale term before it enters `exp`.
pub const LOG_SCALE_CLAMP: f64 = 7.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub n_flows: usize,
    pub n_early_every: usize,
    pub n_early_size: usize,
    pub squeeze_channels: usize,
    pub lvc_layers_per_flow: usize,
    pub lvc_channels: usize,
    /// Kernel size of each LVC layer in a coupling network; layer `l` uses
    /// dilation `2^l`.
    pub lvc_kernel_sizes: Vec<usize>,
    pub kp: KernelPredictorConfig,
    pub stft: StftConfig,
    pub sigma_train: f64,
    pub sigma_sample: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self::melglow(32)
    }
}

impl FlowConfig {
    /// Full-size model with `lvc_channels` channels in every LVC layer.
    ///
    /// Only the first two (dilation 1 and 2) LVC layers use 3-tap kernels;
    /// the wider-dilation layers are pointwise. With a 5-tap residual stack
    /// in the predictor this lands the parameter totals of the 32/48/64/128
    /// channel models at 19.5/41.7/72.6/284 M.
    pub fn melglow(lvc_channels: usize) -> Self {
        Self {
            n_flows: 12,
            n_early_every: 4,
            n_early_size: 2,
            squeeze_channels: 8,
            lvc_layers_per_flow: 7,
            lvc_channels,
            lvc_kernel_sizes: vec![3, 3, 1, 1, 1, 1, 1],
            kp: KernelPredictorConfig {
                hidden_ch: 64,
                residual_blocks: 3,
                kp_kernel_size: 5,
            },
            stft: StftConfig::default(),
            sigma_train: 1.0,
            sigma_sample: 0.6,
        }
    }

    /// Desk-scale model used by tests and quick experiments.
    pub fn tiny() -> Self {
        Self {
            n_flows: 4,
            n_early_every: 2,
            n_early_size: 2,
            squeeze_channels: 8,
            lvc_layers_per_flow: 7,
            lvc_channels: 16,
            lvc_kernel_sizes: vec![3; 7],
            kp: KernelPredictorConfig {
                hidden_ch: 16,
                residual_blocks: 2,
                kp_kernel_size: 3,
            },
            stft: StftConfig::default(),
            sigma_train: 1.0,
            sigma_sample: 0.6,
        }
    }

    /// Smallest useful model: a 4-channel squeeze with an 8-sample hop, an
    /// odd channel split after the early output and mixed kernel sizes. Used
    /// where the full Jacobian has to be materialised.
    pub fn micro() -> Self {
        Self {
            n_flows: 4,
            n_early_every: 2,
            n_early_size: 1,
            squeeze_channels: 4,
            lvc_layers_per_flow: 3,
            lvc_channels: 3,
            lvc_kernel_sizes: vec![3, 1, 3],
            kp: KernelPredictorConfig {
                hidden_ch: 3,
                residual_blocks: 1,
                kp_kernel_size: 3,
            },
            stft: StftConfig {
                fft_size: 16,
                win_length: 16,
                hop_length: 8,
                num_mels: 4,
                ..StftConfig::default()
            },
            sigma_train: 1.0,
            sigma_sample: 0.6,
        }
    }

    /// Named flow presets; see [`preset_names`].
    pub fn preset(name: &str) -> Option<Self> {
        let mut cfg = match name {
            "tiny" => return Some(Self::tiny()),
            "micro" => return Some(Self::micro()),
            "melglow-32" => Self::melglow(32),
            "melglow-48" => Self::melglow(48),
            "melglow-64" => Self::melglow(64),
            "melglow-128" => Self::melglow(128),
            "melglow-kp-32c" | "melglow-kp-64c" | "melglow-kp-128c" | "melglow-kp-1l"
            | "melglow-kp-3l" | "melglow-kp-5l" => Self::melglow(32),
            _ => return None,
        };
        match name {
            "melglow-kp-32c" => cfg.kp.hidden_ch = 32,
            "melglow-kp-128c" => cfg.kp.hidden_ch = 128,
            "melglow-kp-1l" => cfg.kp.residual_blocks = 1,
            "melglow-kp-5l" => cfg.kp.residual_blocks = 5,
            _ => {}
        }
        Some(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.kp.validate()?;
        let c = self.squeeze_channels;
        if c < 2 {
            return Err(Error::config("squeeze_channels must be at least 2"));
        }
        if !self.stft.hop_length.is_multiple_of(c) || !self.stft.win_length.is_multiple_of(c) {
            return Err(Error::config(format!(
                "hop_length {} and win_length {} must be multiples of squeeze_channels {c}",
                self.stft.hop_length, self.stft.win_length
            )));
        }
        if self.n_flows == 0 || self.lvc_layers_per_flow == 0 || self.lvc_channels == 0 {
            return Err(Error::config(
                "n_flows, lvc_layers_per_flow and lvc_channels must be positive",
            ));
        }
        if self.n_early_every == 0 {
            return Err(Error::config("n_early_every must be positive"));
        }
        if self.lvc_kernel_sizes.len() != self.lvc_layers_per_flow {
            return Err(Error::config(format!(
                "lvc_kernel_sizes has {} entries, lvc_layers_per_flow is {}",
                self.lvc_kernel_sizes.len(),
                self.lvc_layers_per_flow
            )));
        }
        if let Some(k) = self.lvc_kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::config(format!("lvc kernel size {k} must be odd")));
        }
        let last = *self.channel_schedule().last().unwrap_or(&c) as isize;
        let emitted = self.n_early_size * self.early_output_steps().len();
        if (c as isize) - (emitted as isize) < 2 || last < 2 {
            return Err(Error::config(format!(
                "early outputs ({} × {}) leave fewer than 2 of {c} channels",
                self.early_output_steps().len(),
                self.n_early_size
            )));
        }
        if !(self.sigma_train > 0.0 && self.sigma_sample >= 0.0) {
            return Err(Error::config(
                "sigma_train must be positive and sigma_sample non-negative",
            ));
        }
        Ok(())
    }

    /// Flow steps before which `n_early_size` channels are emitted.
    pub fn early_output_steps(&self) -> Vec<usize> {
        (1..self.n_flows)
            .filter(|k| k % self.n_early_every == 0)
            .collect()
    }

    /// Working channel count of each flow step.
    pub fn channel_schedule(&self) -> Vec<usize> {
        let mut c = self.squeeze_channels as isize;
        (0..self.n_flows)
            .map(|k| {
                if k > 0 && k % self.n_early_every == 0 {
                    c -= self.n_early_size as isize;
                }
                c.max(0) as usize
            })
            .collect()
    }

    pub fn dilation(&self, layer: usize) -> usize {
        1 << layer
    }

    /// Squeezed elements advanced per mel frame.
    pub fn frame_hop_elems(&self) -> usize {
        self.stft.hop_length / self.squeeze_channels
    }

    /// Squeezed elements spanned by one analysis window.
    pub fn frame_window_elems(&self) -> usize {
        self.stft.win_length / self.squeeze_channels
    }

    /// The LVC layers one kernel predictor feeds.
    pub fn kernel_targets(&self) -> Vec<KernelTarget> {
        self.lvc_kernel_sizes
            .iter()
            .enumerate()
            .map(|(l, &k)| KernelTarget {
                layer_id: l,
                out_ch: self.lvc_channels,
                in_ch: self.lvc_channels,
                kernel_size: k,
            })
            .collect()
    }
}

pub fn preset_names() -> &'static [&'static str] {
    &[
        "micro",
        "tiny",
        "melglow-32",
        "melglow-48",
        "melglow-64",
        "melglow-128",
        "melglow-kp-32c",
        "melglow-kp-64c",
        "melglow-kp-128c",
        "melglow-kp-1l",
        "melglow-kp-3l",
        "melglow-kp-5l",
    ]
}
