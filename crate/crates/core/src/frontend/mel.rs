use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::stft::Stft;
use super::{StftConfig, Waveform};
use crate::{Error, Result};

/// Floor applied to mel magnitudes before the natural log.
pub const LOG_FLOOR: f64 = 1e-5;

pub const MEL_CACHE_MAGIC: &[u8; 4] = b"MELG";
pub const MEL_CACHE_VERSION: u32 = 1;

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over the linear-frequency STFT bins.
#[derive(Clone, Debug)]
pub struct MelFilterBank {
    /// `num_mels × num_bins`, row-major.
    pub weights: Vec<f64>,
    pub num_mels: usize,
    pub num_bins: usize,
    /// `num_mels + 2` edge frequencies in Hz; filter `m` peaks at `edges[m + 1]`.
    pub edges: Vec<f64>,
}

impl MelFilterBank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.num_bins..(m + 1) * self.num_bins]
    }

    pub fn center_hz(&self, m: usize) -> f64 {
        self.edges[m + 1]
    }

    pub fn apply(&self, magnitude: &[f64]) -> Vec<f64> {
        (0..self.num_mels)
            .map(|m| self.row(m).iter().zip(magnitude).map(|(w, x)| w * x).sum())
            .collect()
    }
}

pub fn mel_filter_bank(cfg: &StftConfig) -> MelFilterBank {
    let nbins = cfg.num_bins();
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.num_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.num_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let mut weights = vec![0.0; cfg.num_mels * nbins];
    for m in 0..cfg.num_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..nbins {
            let f = k as f64 * bin_hz;
            let up = (f - l) / (c - l);
            let down = (r - f) / (r - c);
            weights[m * nbins + k] = up.min(down).max(0.0);
        }
    }
    MelFilterBank {
        weights,
        num_mels: cfg.num_mels,
        num_bins: nbins,
        edges,
    }
}

/// Log-mel spectrogram, `num_frames × num_mels`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Vec<f64>,
    pub num_frames: usize,
    pub num_mels: usize,
    pub hop_length: usize,
    pub win_length: usize,
}

impl MelSpectrogram {
    pub fn from_values(
        values: Vec<f64>,
        num_frames: usize,
        num_mels: usize,
        cfg: &StftConfig,
    ) -> Result<Self> {
        if values.len() != num_frames * num_mels {
            return Err(Error::shape(format!(
                "{} mel values for {num_frames}×{num_mels}",
                values.len()
            )));
        }
        Ok(Self {
            values,
            num_frames,
            num_mels,
            hop_length: cfg.hop_length,
            win_length: cfg.win_length,
        })
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.num_mels..(t + 1) * self.num_mels]
    }

    pub fn get(&self, t: usize, m: usize) -> f64 {
        self.values[t * self.num_mels + m]
    }

    /// Frames `[start, end)` as a new spectrogram.
    pub fn slice_frames(&self, start: usize, end: usize) -> MelSpectrogram {
        MelSpectrogram {
            values: self.values[start * self.num_mels..end * self.num_mels].to_vec(),
            num_frames: end - start,
            ..self.clone()
        }
    }
}

/// Reflection-pad by `win_length / 2`, Hann-window, take STFT magnitudes,
/// project onto the mel filter bank and apply `ln(max(·, 1e-5))`.
pub fn compute_mel(w: &Waveform, cfg: &StftConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if w.is_empty() {
        return Err(Error::EmptyInput("waveform has no samples".into()));
    }
    let bank = mel_filter_bank(cfg);
    let mags = Stft::new(cfg).magnitude(&w.samples);
    debug_assert_eq!(mags.len(), cfg.num_frames(w.len()));
    let mut values = Vec::with_capacity(mags.len() * cfg.num_mels);
    for frame in &mags {
        values.extend(bank.apply(frame).into_iter().map(|v| v.max(LOG_FLOOR).ln()));
    }
    MelSpectrogram::from_values(values, mags.len(), cfg.num_mels, cfg)
}

/// Write the binary mel cache: `"MELG"`, version, frames, mels (all u32 LE),
/// then row-major f32 LE values.
pub fn write_mel_cache(path: impl AsRef<Path>, mel: &MelSpectrogram) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MEL_CACHE_MAGIC)?;
    w.write_u32::<LittleEndian>(MEL_CACHE_VERSION)?;
    w.write_u32::<LittleEndian>(mel.num_frames as u32)?;
    w.write_u32::<LittleEndian>(mel.num_mels as u32)?;
    for &v in &mel.values {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a mel cache. `cfg` supplies the hop/window metadata, which the file
/// does not carry.
pub fn read_mel_cache(path: impl AsRef<Path>, cfg: &StftConfig) -> Result<MelSpectrogram> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MEL_CACHE_MAGIC {
        return Err(Error::Format("mel cache: bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != MEL_CACHE_VERSION {
        return Err(Error::UnsupportedFormat(format!(
            "mel cache version {version}"
        )));
    }
    let frames = r.read_u32::<LittleEndian>()? as usize;
    let mels = r.read_u32::<LittleEndian>()? as usize;
    let mut values = vec![0f32; frames * mels];
    r.read_f32_into::<LittleEndian>(&mut values)
        .map_err(|e| Error::Format(format!("mel cache truncated: {e}")))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format("mel cache has trailing bytes".into()));
    }
    MelSpectrogram::from_values(
        values.into_iter().map(f64::from).collect(),
        frames,
        mels,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, n: usize, sr: u32) -> Waveform {
        Waveform::new(
            (0..n)
                .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / sr as f64).sin())
                .collect(),
            sr,
        )
    }

    #[test]
    fn htk_mel_round_trip() {
        for f in [0.0, 60.0, 440.0, 1000.0, 7600.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn filter_bank_is_nonnegative_and_covers_range() {
        let cfg = StftConfig::default();
        let bank = mel_filter_bank(&cfg);
        assert!(bank.weights.iter().all(|&w| w >= 0.0));
        let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
        for k in 0..bank.num_bins {
            let f = k as f64 * bin_hz;
            let total: f64 = (0..bank.num_mels).map(|m| bank.row(m)[k]).sum();
            if f > cfg.fmin && f < cfg.fmax {
                assert!(total > 0.0, "bin {k} ({f} Hz) uncovered");
                // adjacent triangles form a partition of unity between the
                // first and last centres
                if f >= bank.center_hz(0) && f <= bank.center_hz(bank.num_mels - 1) {
                    assert!((total - 1.0).abs() < 1e-9);
                }
            } else {
                assert_eq!(total, 0.0);
            }
        }
    }

    #[test]
    fn sine_peaks_at_nearest_filter_center() {
        let cfg = StftConfig::default();
        let mel = compute_mel(&sine(440.0, 22050, 22050), &cfg).unwrap();
        let bank = mel_filter_bank(&cfg);
        // oracle: the filter whose center is nearest 440 Hz
        let expected = (0..cfg.num_mels)
            .min_by(|&a, &b| {
                (bank.center_hz(a) - 440.0)
                    .abs()
                    .total_cmp(&(bank.center_hz(b) - 440.0).abs())
            })
            .unwrap();
        for t in 4..mel.num_frames - 4 {
            let row = mel.frame(t);
            let argmax = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            assert_eq!(argmax, expected, "frame {t}");
        }
    }

    #[test]
    fn silence_and_frame_counts() {
        let cfg = StftConfig::default();
        let mel = compute_mel(&Waveform::new(vec![0.0; 22016], 22050), &cfg).unwrap();
        assert_eq!(mel.num_frames, 87);
        assert!(mel.values.iter().all(|&v| v == LOG_FLOOR.ln()));
        let short = compute_mel(&Waveform::new(vec![0.1; 256], 22050), &cfg).unwrap();
        assert_eq!(short.num_frames, 2);
        assert!(matches!(
            compute_mel(&Waveform::new(vec![], 22050), &cfg),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn deterministic() {
        let cfg = StftConfig::default();
        let w = sine(1234.5, 5000, 22050);
        assert_eq!(
            compute_mel(&w, &cfg).unwrap(),
            compute_mel(&w, &cfg).unwrap()
        );
    }

    #[test]
    fn cache_round_trip_and_errors() {
        let cfg = StftConfig::default();
        let mel = compute_mel(&sine(300.0, 3000, 22050), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mel");
        write_mel_cache(&p, &mel).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"MELG");
        assert_eq!(bytes.len(), 16 + 4 * mel.values.len());
        let back = read_mel_cache(&p, &cfg).unwrap();
        assert_eq!(back.num_frames, mel.num_frames);
        for (a, b) in mel.values.iter().zip(&back.values) {
            assert_eq!(*a as f32 as f64, *b);
        }
        std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_mel_cache(&p, &cfg), Err(Error::Format(_))));
        std::fs::write(&p, b"NOPE0000000000000000").unwrap();
        assert!(matches!(read_mel_cache(&p, &cfg), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn frame_count_formula(n in 1usize..30000) {
            let cfg = StftConfig::default();
            let mel = compute_mel(&Waveform::new(vec![0.01; n], 22050), &cfg).unwrap();
            prop_assert_eq!(mel.num_frames, n / 256 + 1);
        }
    }

    #[test]
    fn frame_count_named_lengths() {
        let cfg = StftConfig::default();
        for n in [1usize, 255, 256, 257, 22050] {
            let mel = compute_mel(&Waveform::new(vec![0.01; n], 22050), &cfg).unwrap();
            assert_eq!(mel.num_frames, n / 256 + 1, "n = {n}");
        }
    }
}
