use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use super::mel::{mel_filter_bank, MelSpectrogram, LOG_FLOOR};
use super::stft::Stft;
use super::{StftConfig, Waveform};
use crate::{Error, Result};

/// Moore-Penrose pseudo-inverse of the mel filter bank, `num_bins × num_mels`.
pub fn mel_pseudo_inverse(cfg: &StftConfig) -> Result<DMatrix<f64>> {
    let bank = mel_filter_bank(cfg);
    DMatrix::from_row_slice(bank.num_mels, bank.num_bins, &bank.weights)
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::Numeric(format!("mel pseudo-inverse: {e}")))
}

/// Approximate linear magnitudes (frames × bins), clamped at zero.
fn linear_magnitudes(mel: &MelSpectrogram, cfg: &StftConfig) -> Result<Vec<Vec<f64>>> {
    if mel.num_mels != cfg.num_mels {
        return Err(Error::shape(format!(
            "mel has {} channels, config expects {}",
            mel.num_mels, cfg.num_mels
        )));
    }
    let pinv = mel_pseudo_inverse(cfg)?;
    Ok((0..mel.num_frames)
        .map(|t| {
            let m = nalgebra::DVector::from_iterator(
                mel.num_mels,
                mel.frame(t).iter().map(|v| v.exp()),
            );
            (&pinv * m).iter().map(|v| v.max(0.0)).collect()
        })
        .collect())
}

/// Griffin-Lim reconstruction of a waveform of `(num_frames - 1) * hop`
/// samples from a log-mel spectrogram.
pub fn griffin_lim(mel: &MelSpectrogram, cfg: &StftConfig, iterations: usize) -> Result<Waveform> {
    griffin_lim_traced(mel, cfg, iterations).map(|(w, _)| w)
}

/// Like [`griffin_lim`], also returning the STFT-magnitude consistency error
/// `‖ |STFT(y_k)| − A ‖₂` measured at every iteration.
pub fn griffin_lim_traced(
    mel: &MelSpectrogram,
    cfg: &StftConfig,
    iterations: usize,
) -> Result<(Waveform, Vec<f64>)> {
    cfg.validate()?;
    if iterations == 0 {
        return Err(Error::config("griffin_lim needs at least one iteration"));
    }
    let out_len = mel.num_frames.saturating_sub(1) * cfg.hop_length;
    let silent_level = LOG_FLOOR.ln() + 1e-9;
    if mel.num_frames == 0 || mel.values.iter().all(|&v| v <= silent_level) {
        return Ok((
            Waveform::new(vec![0.0; out_len], cfg.sample_rate),
            vec![0.0; iterations],
        ));
    }

    let target = linear_magnitudes(mel, cfg)?;
    let stft = Stft::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut spec: Vec<Vec<Complex<f64>>> = target
        .iter()
        .map(|row| {
            row.iter()
                .map(|&a| Complex::from_polar(a, rng.random_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();

    let mut errors = Vec::with_capacity(iterations);
    let mut y = Vec::new();
    for _ in 0..iterations {
        y = stft.synthesize(&spec);
        let rebuilt = stft.analyze(&y);
        let mut err = 0.0;
        for ((dst, src), amp) in spec.iter_mut().zip(&rebuilt).zip(&target) {
            for ((d, s), &a) in dst.iter_mut().zip(src).zip(amp) {
                let mag = s.norm();
                err += (mag - a) * (mag - a);
                *d = if mag > 0.0 {
                    s * (a / mag)
                } else {
                    Complex::new(a, 0.0)
                };
            }
        }
        errors.push(err.sqrt());
    }
    let start = cfg.win_length / 2;
    let samples = y[start..start + out_len].to_vec();
    Ok((Waveform::new(samples, cfg.sample_rate), errors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::compute_mel;
    use crate::frontend::stft::{average_spectrum, dominant_peaks};
    use std::f64::consts::PI;

    fn sine_mel(freq: f64) -> (MelSpectrogram, StftConfig) {
        let cfg = StftConfig::default();
        let w = Waveform::new(
            (0..22016)
                .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / 22050.0).sin())
                .collect(),
            22050,
        );
        (compute_mel(&w, &cfg).unwrap(), cfg)
    }

    #[test]
    fn reconstructs_sine_frequency() {
        let (mel, cfg) = sine_mel(440.0);
        let y = griffin_lim(&mel, &cfg, 60).unwrap();
        assert_eq!(y.len(), (mel.num_frames - 1) * 256);
        // oracle: FFT (fft_size points, magnitude averaged over frames) of the output
        let spectrum = average_spectrum(&y.samples, &cfg);
        let peak = dominant_peaks(&spectrum, 1)[0];
        let expected = 440.0 * cfg.fft_size as f64 / 22050.0;
        assert!(
            (peak as f64 - expected).abs() <= 2.0,
            "peak bin {peak}, expected {expected}"
        );
    }

    #[test]
    fn silence_in_silence_out() {
        let cfg = StftConfig::default();
        let mel = MelSpectrogram::from_values(vec![LOG_FLOOR.ln(); 10 * 80], 10, 80, &cfg).unwrap();
        let y = griffin_lim(&mel, &cfg, 5).unwrap();
        assert_eq!(y.len(), 9 * 256);
        assert!(y.rms() < 1e-3);
    }

    #[test]
    fn consistency_error_does_not_grow() {
        let (mel, cfg) = sine_mel(1000.0);
        let (_, one) = griffin_lim_traced(&mel, &cfg, 1).unwrap();
        let (_, sixty) = griffin_lim_traced(&mel, &cfg, 60).unwrap();
        assert_eq!(one[0], sixty[0]);
        assert!(sixty[59] <= one[0], "{} > {}", sixty[59], one[0]);
        for w in sixty.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9));
        }
    }

    #[test]
    fn rejects_mismatched_channels() {
        let cfg = StftConfig::default();
        let mel = MelSpectrogram::from_values(vec![0.0; 4 * 40], 4, 40, &cfg).unwrap();
        assert!(matches!(griffin_lim(&mel, &cfg, 2), Err(Error::Shape(_))));
    }
}
