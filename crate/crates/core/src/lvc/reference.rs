//! Brute-force reference implementations used as independent oracles.
//!
//! These materialise each interval's zero-padded input context and run an
//! ordinary "valid" gated convolution over it with plain index arithmetic,
//! sharing no code with the production kernels.

use crate::real::sigmoid;
use crate::{Real, Tensor};

use super::{IntervalMap, KernelSet};

fn gated(f: f64, g: f64) -> f64 {
    f.tanh() * sigmoid(g)
}

/// Per-interval LVC oracle: for frame `i`, copy `x` over
/// `[start - halo, end + halo)` (zeros outside the sequence), convolve with
/// frame `i`'s kernels and keep the interval's outputs.
pub fn lvc_reference<T: Real>(x: &Tensor<T>, k: &KernelSet<T>, map: &IntervalMap) -> Tensor<T> {
    let (frames, out_ch, in_ch, ks) = (k.num_frames(), k.out_ch(), k.in_ch(), k.kernel_size());
    let hop = map.frame_hop_elems;
    let d = map.dilation;
    let halo = d * (ks - 1) / 2;
    let len = x.dim(1);
    let mut z = Tensor::zeros(&[out_ch, len]);
    for i in 0..frames {
        let start = i * hop;
        let width = hop + 2 * halo;
        // padded context, in_ch × width, position p ↔ sequence index start + p - halo
        let mut ctx = vec![vec![0.0f64; width]; in_ch];
        for (c, row) in ctx.iter_mut().enumerate() {
            for (p, v) in row.iter_mut().enumerate() {
                let idx = start as i64 + p as i64 - halo as i64;
                if idx >= 0 && (idx as usize) < len {
                    *v = x.data()[c * len + idx as usize].to_f64_lossy();
                }
            }
        }
        for o in 0..out_ch {
            for t in 0..hop {
                let mut f = k.b_f.data()[i * out_ch + o].to_f64_lossy();
                let mut g = k.b_g.data()[i * out_ch + o].to_f64_lossy();
                for (c, row) in ctx.iter().enumerate() {
                    for j in 0..ks {
                        let w = (((i * out_ch + o) * in_ch + c) * ks) + j;
                        let xv = row[t + j * d];
                        f += k.w_f.data()[w].to_f64_lossy() * xv;
                        g += k.w_g.data()[w].to_f64_lossy() * xv;
                    }
                }
                z.data_mut()[o * len + start + t] = T::of(gated(f, g));
            }
        }
    }
    z
}

/// Ordinary (location-invariant) centred gated convolution with a single
/// kernel `(out_ch, in_ch, K)` and zero padding.
pub fn gated_conv_reference<T: Real>(
    x: &Tensor<T>,
    w_f: &Tensor<T>,
    w_g: &Tensor<T>,
    b_f: &[T],
    b_g: &[T],
    dilation: usize,
) -> Tensor<T> {
    let (out_ch, in_ch, ks) = (w_f.dim(0), w_f.dim(1), w_f.dim(2));
    let len = x.dim(1);
    let mut z = Tensor::zeros(&[out_ch, len]);
    for o in 0..out_ch {
        for t in 0..len {
            let mut f = b_f[o].to_f64_lossy();
            let mut g = b_g[o].to_f64_lossy();
            for c in 0..in_ch {
                for j in 0..ks {
                    let idx = t as i64 + (j as i64 - (ks / 2) as i64) * dilation as i64;
                    if idx < 0 || idx >= len as i64 {
                        continue;
                    }
                    let xv = x.data()[c * len + idx as usize].to_f64_lossy();
                    f += w_f.data()[(o * in_ch + c) * ks + j].to_f64_lossy() * xv;
                    g += w_g.data()[(o * in_ch + c) * ks + j].to_f64_lossy() * xv;
                }
            }
            z.data_mut()[o * len + t] = T::of(gated(f, g));
        }
    }
    z
}
