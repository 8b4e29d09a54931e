//! Short-time Fourier transform helpers shared by the mel front end and
//! Griffin-Lim.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::StftConfig;

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Mirror index `i` (which may lie outside `[0, n)`) back into range, without
/// repeating the edge sample. Works for any `n ≥ 1`.
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

/// Reflection padding of `pad` samples at both ends.
pub fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    (0..n + 2 * pad)
        .map(|i| x[mirror(i as isize - pad as isize, n)])
        .collect()
}

pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: &StftConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            cfg: cfg.clone(),
            window: hann_window(cfg.win_length),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        }
    }

    fn offset(&self) -> usize {
        (self.cfg.fft_size - self.cfg.win_length) / 2
    }

    /// Number of frames over an already padded signal.
    pub fn frames_in(&self, padded_len: usize) -> usize {
        if padded_len < self.cfg.win_length {
            0
        } else {
            (padded_len - self.cfg.win_length) / self.cfg.hop_length + 1
        }
    }

    /// Complex spectra (bins `0..=fft/2`) of every frame of `padded`.
    pub fn analyze(&self, padded: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let (win, hop, nfft) = (self.cfg.win_length, self.cfg.hop_length, self.cfg.fft_size);
        let off = self.offset();
        let nbins = nfft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); nfft];
        (0..self.frames_in(padded.len()))
            .map(|f| {
                buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
                let frame = &padded[f * hop..f * hop + win];
                for (i, (&x, &w)) in frame.iter().zip(&self.window).enumerate() {
                    buf[off + i] = Complex::new(x * w, 0.0);
                }
                self.forward.process(&mut buf);
                buf[..nbins].to_vec()
            })
            .collect()
    }

    /// Least-squares inverse STFT into the padded domain: windowed overlap-add
    /// divided by the summed squared window. Output length is
    /// `(frames - 1) * hop + win`.
    pub fn synthesize(&self, spectra: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let (win, hop, nfft) = (self.cfg.win_length, self.cfg.hop_length, self.cfg.fft_size);
        if spectra.is_empty() {
            return Vec::new();
        }
        let off = self.offset();
        let len = (spectra.len() - 1) * hop + win;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); nfft];
        for (f, spec) in spectra.iter().enumerate() {
            buf[..spec.len()].copy_from_slice(spec);
            for k in 1..nfft - spec.len() + 1 {
                buf[nfft - k] = spec[k].conj();
            }
            self.inverse.process(&mut buf);
            for i in 0..win {
                let w = self.window[i];
                out[f * hop + i] += buf[off + i].re / nfft as f64 * w;
                norm[f * hop + i] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            if *n > 1e-10 {
                *o /= n;
            }
        }
        out
    }

    /// Magnitude spectrogram (frames × bins) of `x` with reflection padding
    /// of `win_length / 2` at each end.
    pub fn magnitude(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let padded = reflect_pad(x, self.cfg.win_length / 2);
        self.analyze(&padded)
            .into_iter()
            .map(|s| s.iter().map(|c| c.norm()).collect())
            .collect()
    }
}

/// Mean STFT magnitude per bin over all frames of `x` (a Welch-style
/// long-term spectrum with `fft_size` resolution).
pub fn average_spectrum(x: &[f64], cfg: &StftConfig) -> Vec<f64> {
    let mags = Stft::new(cfg).magnitude(x);
    let mut avg = vec![0.0; cfg.num_bins()];
    for frame in &mags {
        for (a, m) in avg.iter_mut().zip(frame) {
            *a += m;
        }
    }
    let n = mags.len().max(1) as f64;
    avg.iter_mut().for_each(|a| *a /= n);
    avg
}

/// Indices of the `count` largest local maxima of `spectrum`, strongest
/// first. Bin 0 (DC) is ignored.
pub fn dominant_peaks(spectrum: &[f64], count: usize) -> Vec<usize> {
    let mut peaks: Vec<usize> = (1..spectrum.len().saturating_sub(1))
        .filter(|&k| spectrum[k] >= spectrum[k - 1] && spectrum[k] > spectrum[k + 1])
        .collect();
    peaks.sort_by(|&a, &b| spectrum[b].total_cmp(&spectrum[a]));
    peaks.truncate(count);
    peaks
}
