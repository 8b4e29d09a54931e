use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::{Error, Result};

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::FormatError(msg) => Error::Format(msg.to_string()),
        hound::Error::Unsupported => Error::UnsupportedFormat("unsupported WAV encoding".into()),
        other => Error::Format(other.to_string()),
    }
}

/// Read a PCM16 or float32 WAV file. Multi-channel files keep only the first
/// channel; int16 samples are divided by 32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let reader = WavReader::open(path.as_ref()).map_err(map_hound)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(map_hound)?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "{bits}-bit {fmt:?} samples (expected PCM16 or float32)"
            )))
        }
    };
    let samples = interleaved
        .into_iter()
        .step_by(channels)
        .collect::<Vec<_>>();
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite sample in WAV data".into()));
    }
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Write a mono PCM16 WAV file. Samples are clamped to [-1, 1] first.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    if w.samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cannot write non-finite samples".into()));
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path.as_ref(), spec).map_err(map_hound)?;
    for &s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0)
            .round()
            .clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(map_hound)?;
    }
    writer.finalize().map_err(map_hound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn int16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 22050,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut wr = WavWriter::create(&p, spec).unwrap();
        for v in [0i16, 16384, -32768] {
            wr.write_sample(v).unwrap();
        }
        wr.finalize().unwrap();
        let w = read_wav(&p).unwrap();
        assert_eq!(w.samples, vec![0.0, 0.5, -1.0]);
        assert_eq!(w.sample_rate, 22050);
    }

    #[test]
    fn empty_data_chunk_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.wav");
        write_wav(&p, &Waveform::new(vec![], 22050)).unwrap();
        let w = read_wav(&p).unwrap();
        assert!(w.is_empty());
        assert_eq!(w.sample_rate, 22050);
    }

    #[test]
    fn stereo_takes_first_channel_and_float_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut wr = WavWriter::create(&p, spec).unwrap();
        for (l, r) in [(0.25f32, -1.0f32), (-0.5, 1.0)] {
            wr.write_sample(l).unwrap();
            wr.write_sample(r).unwrap();
        }
        wr.finalize().unwrap();
        let w = read_wav(&p).unwrap();
        assert_eq!(w.samples, vec![0.25, -0.5]);
        assert_eq!(w.sample_rate, 16000);
    }

    #[test]
    fn unsupported_encoding_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i24.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 22050,
            bits_per_sample: 24,
            sample_format: SampleFormat::Int,
        };
        let mut wr = WavWriter::create(&p, spec).unwrap();
        wr.write_sample(5i32).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(read_wav(&p), Err(Error::UnsupportedFormat(_))));

        let g = dir.path().join("garbage.wav");
        std::fs::write(&g, b"RIFX not really a wave file").unwrap();
        assert!(matches!(read_wav(&g), Err(Error::Format(_))));
    }

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let w = Waveform::new(samples.clone(), 22050);
        write_wav(&p, &w).unwrap();
        let back = read_wav(&p).unwrap();
        let err = samples
            .iter()
            .zip(&back.samples)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1.0 / 32768.0, "max error {err}");
    }

    #[test]
    fn clamps_out_of_range_and_keeps_duration() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.wav");
        write_wav(&p, &Waveform::new(vec![2.0, -3.0], 22050)).unwrap();
        let back = read_wav(&p).unwrap();
        assert!(back.samples[0] >= 1.0 - 1.0 / 32768.0 && back.samples[0] <= 1.0);
        assert_eq!(back.samples[1], -1.0);

        write_wav(&p, &Waveform::new(vec![0.0; 22050], 22050)).unwrap();
        let r = hound::WavReader::open(&p).unwrap();
        assert_eq!(r.duration() as f64 / r.spec().sample_rate as f64, 1.0);
    }
}
