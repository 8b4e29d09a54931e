//! Training data: synthetic clips and random fixed-length crops.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::frontend::{compute_mel, MelSpectrogram, StftConfig, Waveform};
use crate::predictor::mel_tensor;
use crate::{Error, Real, Result, Tensor};

pub const SYNTHETIC_SAMPLE_RATE: u32 = 22_050;
pub const SYNTHETIC_SECONDS: f64 = 1.2;
pub const SYNTHETIC_PEAK: f64 = 0.9;
const MIN_PARTIAL_HZ: f64 = 100.0;
const MAX_PARTIAL_HZ: f64 = 4000.0;
/// Partials are kept at least this far apart so each stays a separate
/// spectral peak.
const MIN_PARTIAL_SPACING_HZ: f64 = 150.0;
const NOISE_STD: f64 = 0.005;

/// A synthetic clip with the frequencies it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub wave: Waveform,
    pub partials_hz: Vec<f64>,
}

/// `n_clips` sums of 2–4 amplitude-modulated sine partials plus a little
/// noise, each 1.2 s at 22.05 kHz and peak-normalised to 0.9.
pub fn make_synthetic_dataset(n_clips: usize, seed: u64) -> Vec<SyntheticClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = SYNTHETIC_SAMPLE_RATE as f64;
    let len = (SYNTHETIC_SECONDS * sr).round() as usize;
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    (0..n_clips)
        .map(|_| {
            let count = rng.random_range(2..=4);
            let mut partials: Vec<f64> = Vec::with_capacity(count);
            while partials.len() < count {
                let f = rng.random_range(MIN_PARTIAL_HZ..MAX_PARTIAL_HZ);
                if partials
                    .iter()
                    .all(|p| (p - f).abs() >= MIN_PARTIAL_SPACING_HZ)
                {
                    partials.push(f);
                }
            }
            let mut samples = vec![0.0; len];
            for &f in &partials {
                let amp = rng.random_range(0.4..1.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let am_rate = rng.random_range(0.5..3.0);
                let am_depth = rng.random_range(0.0..0.5);
                let am_phase = rng.random_range(0.0..std::f64::consts::TAU);
                for (n, s) in samples.iter_mut().enumerate() {
                    let t = n as f64 / sr;
                    let env =
                        1.0 + am_depth * (std::f64::consts::TAU * am_rate * t + am_phase).sin();
                    *s += amp * env * (std::f64::consts::TAU * f * t + phase).sin();
                }
            }
            for s in &mut samples {
                *s += noise.sample(&mut rng);
            }
            let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            samples.iter_mut().for_each(|s| *s *= SYNTHETIC_PEAK / peak);
            SyntheticClip {
                wave: Waveform::new(samples, SYNTHETIC_SAMPLE_RATE),
                partials_hz: partials,
            }
        })
        .collect()
}

/// Crop length for `clip_seconds`: the largest whole number of hops that
/// fits.
pub fn crop_length(clip_seconds: f64, stft: &StftConfig) -> usize {
    let n = (clip_seconds * stft.sample_rate as f64).floor() as usize;
    n / stft.hop_length * stft.hop_length
}

/// One training batch: hop-aligned waveform crops and their mels (one more
/// frame than the crop has hops).
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub waves: Vec<Vec<T>>,
    pub mels: Vec<Tensor<T>>,
}

impl<T: Real> Batch<T> {
    pub fn from_crops(crops: &[Vec<f64>], stft: &StftConfig) -> Result<Self> {
        let mut waves = Vec::with_capacity(crops.len());
        let mut mels = Vec::with_capacity(crops.len());
        for c in crops {
            let mel = compute_mel(&Waveform::new(c.clone(), stft.sample_rate), stft)?;
            mels.push(mel_tensor::<T>(&mel));
            waves.push(c.iter().map(|&v| T::of(v)).collect());
        }
        Ok(Self { waves, mels })
    }
}

/// Draw `batch_size` uniformly random crops (items may repeat). Items
/// shorter than the crop are skipped with a warning; an error is returned
/// when none is long enough.
pub fn make_batch<T: Real, R: Rng + ?Sized>(
    dataset: &[Waveform],
    batch_size: usize,
    clip_seconds: f64,
    stft: &StftConfig,
    rng: &mut R,
) -> Result<Batch<T>> {
    let len = crop_length(clip_seconds, stft);
    if len == 0 {
        return Err(Error::config(format!(
            "clip_seconds {clip_seconds} is shorter than one hop"
        )));
    }
    let usable: Vec<&Waveform> = dataset
        .iter()
        .filter(|w| {
            let ok = w.len() >= len;
            if !ok {
                log::warn!(
                    "skipping item of {} samples, shorter than the {len}-sample crop",
                    w.len()
                );
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::InputTooShort(format!(
            "no dataset item has at least {len} samples"
        )));
    }
    let crops: Vec<Vec<f64>> = (0..batch_size)
        .map(|_| {
            let w = usable[rng.random_range(0..usable.len())];
            let start = rng.random_range(0..=w.len() - len);
            w.samples[start..start + len].to_vec()
        })
        .collect();
    Batch::from_crops(&crops, stft)
}

/// Mel of a waveform as used by the model (for callers that already hold
/// an aligned crop).
pub fn model_mel<T: Real>(w: &Waveform, stft: &StftConfig) -> Result<(MelSpectrogram, Tensor<T>)> {
    let mel = compute_mel(w, stft)?;
    let t = mel_tensor(&mel);
    Ok((mel, t))
}
