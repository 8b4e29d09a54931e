use crate::{Error, Real, Result, Tensor};

/// A 1-channel sequence regrouped into `channels` interleaved channels:
/// `data[c][t] == samples[channels * t + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SqueezedSignal<T> {
    pub data: Tensor<T>,
    pub original_length: usize,
}

impl<T: Real> SqueezedSignal<T> {
    pub fn channels(&self) -> usize {
        self.data.dim(0)
    }

    pub fn steps(&self) -> usize {
        self.data.dim(1)
    }
}

pub fn squeeze<T: Real>(samples: &[T], channels: usize) -> Result<SqueezedSignal<T>> {
    if channels == 0 || !samples.len().is_multiple_of(channels) {
        return Err(Error::shape(format!(
            "length {} is not divisible by {channels}",
            samples.len()
        )));
    }
    let steps = samples.len() / channels;
    let mut data = Tensor::zeros(&[channels, steps]);
    for (i, &s) in samples.iter().enumerate() {
        data.data_mut()[(i % channels) * steps + i / channels] = s;
    }
    Ok(SqueezedSignal {
        data,
        original_length: samples.len(),
    })
}

pub fn unsqueeze<T: Real>(s: &SqueezedSignal<T>) -> Vec<T> {
    let (channels, steps) = (s.channels(), s.steps());
    let mut out = vec![T::zero(); channels * steps];
    for c in 0..channels {
        for (t, &v) in s.data.row(c).iter().enumerate() {
            out[t * channels + c] = v;
        }
    }
    out
}
