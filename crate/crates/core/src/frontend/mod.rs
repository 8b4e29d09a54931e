//! Deterministic signal processing: WAV I/O, STFT and mel features, the
//! squeeze used by the flow, and a Griffin-Lim baseline synthesizer.

mod griffin_lim;
mod mel;
mod squeeze;
pub mod stft;
mod wav;

use serde::{Deserialize, Serialize};

pub use griffin_lim::{griffin_lim, griffin_lim_traced, mel_pseudo_inverse};
pub use mel::{
    compute_mel, hz_to_mel, mel_filter_bank, mel_to_hz, read_mel_cache, write_mel_cache,
    MelFilterBank, MelSpectrogram, LOG_FLOOR, MEL_CACHE_MAGIC, MEL_CACHE_VERSION,
};
pub use squeeze::{squeeze, unsqueeze, SqueezedSignal};
pub use wav::{read_wav, write_wav};

use crate::{Error, Result};

/// Mono audio with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Drop trailing samples so the length is a multiple of `multiple`.
    pub fn trimmed_to_multiple(&self, multiple: usize) -> Waveform {
        let n = self.samples.len() / multiple * multiple;
        Waveform::new(self.samples[..n].to_vec(), self.sample_rate)
    }
}

/// STFT and mel filter-bank parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub num_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            fft_size: 1024,
            win_length: 1024,
            hop_length: 256,
            num_mels: 80,
            fmin: 60.0,
            fmax: 7600.0,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.hop_length == 0 || self.win_length == 0 {
            return Err(Error::config(
                "sample_rate, hop_length and win_length must be positive",
            ));
        }
        if self.win_length > self.fft_size {
            return Err(Error::config(format!(
                "win_length {} exceeds fft_size {}",
                self.win_length, self.fft_size
            )));
        }
        if !self.win_length.is_multiple_of(2) {
            return Err(Error::config("win_length must be even"));
        }
        if self.num_mels == 0 {
            return Err(Error::config("num_mels must be positive"));
        }
        if !(self.fmin >= 0.0
            && self.fmin < self.fmax
            && self.fmax <= self.sample_rate as f64 / 2.0)
        {
            return Err(Error::config(format!(
                "mel range [{}, {}] invalid for sample rate {}",
                self.fmin, self.fmax, self.sample_rate
            )));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of mel frames produced for a waveform of `n` samples.
    pub fn num_frames(&self, n: usize) -> usize {
        n / self.hop_length + 1
    }
}
