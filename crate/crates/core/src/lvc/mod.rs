//! Location-variable convolution.
//!
//! The input sequence `x` (channels × T) is divided into consecutive
//! intervals of `frame_hop_elems` output positions, one per conditioning
//! frame. Interval `i` is produced by its own gated convolution
//!
//! ```text
//! z[:, t] = tanh(W_f[i] ⊛ x + b_f[i]) ⊙ σ(W_g[i] ⊛ x + b_g[i]),   t ∈ interval i
//! ```
//!
//! where `⊛` is a centred dilated convolution that reads the true
//! neighbouring input values across interval seams and zero-pads only at the
//! ends of the sequence. Kernels are indexed by output position, so the
//! outputs of the intervals simply concatenate.

pub mod reference;

use std::ops::Range;

use crate::gemm::{fold, gemm, unfold, MatRef};
use crate::real::sigmoid;
use crate::{Error, Real, Result, Tensor};

/// Per-frame filter/gate kernels and biases for one LVC layer.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSet<T> {
    /// `(frames, out_ch, in_ch, kernel_size)`
    pub w_f: Tensor<T>,
    pub w_g: Tensor<T>,
    /// `(frames, out_ch)`
    pub b_f: Tensor<T>,
    pub b_g: Tensor<T>,
}

impl<T: Real> KernelSet<T> {
    pub fn zeros(frames: usize, out_ch: usize, in_ch: usize, kernel_size: usize) -> Self {
        let w = [frames, out_ch, in_ch, kernel_size];
        Self {
            w_f: Tensor::zeros(&w),
            w_g: Tensor::zeros(&w),
            b_f: Tensor::zeros(&[frames, out_ch]),
            b_g: Tensor::zeros(&[frames, out_ch]),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.w_f.dim(0)
    }

    pub fn out_ch(&self) -> usize {
        self.w_f.dim(1)
    }

    pub fn in_ch(&self) -> usize {
        self.w_f.dim(2)
    }

    pub fn kernel_size(&self) -> usize {
        self.w_f.dim(3)
    }

    /// Coefficients needed per frame: filter and gate kernels plus biases.
    pub fn coeffs_per_frame(out_ch: usize, in_ch: usize, kernel_size: usize) -> usize {
        2 * out_ch * in_ch * kernel_size + 2 * out_ch
    }

    pub fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.w_f, &self.w_g, &self.b_f, &self.b_g]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.w_f, &mut self.w_g, &mut self.b_f, &mut self.b_g]
    }

    pub fn add_assign(&mut self, other: &KernelSet<T>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    fn check(&self) -> Result<()> {
        let w = self.w_f.shape();
        if w.len() != 4 || self.w_g.shape() != w {
            return Err(Error::shape(
                "filter and gate kernels must share a 4-D shape",
            ));
        }
        if self.b_f.shape() != [w[0], w[1]] || self.b_g.shape() != [w[0], w[1]] {
            return Err(Error::shape("bias shape must be (frames, out_ch)"));
        }
        if w[3].is_multiple_of(2) {
            return Err(Error::shape(format!("kernel size {} must be odd", w[3])));
        }
        if !self.tensors().iter().all(|t| t.all_finite()) {
            return Err(Error::Numeric("non-finite kernel coefficient".into()));
        }
        Ok(())
    }
}

/// How conditioning frames map onto the (squeezed) input sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IntervalMap {
    /// Input elements advanced per conditioning frame.
    pub frame_hop_elems: usize,
    /// Span of the analysis window of one frame, in input elements.
    pub frame_window_elems: usize,
    pub dilation: usize,
}

impl IntervalMap {
    pub fn new(frame_hop_elems: usize, frame_window_elems: usize, dilation: usize) -> Self {
        Self {
            frame_hop_elems,
            frame_window_elems,
            dilation,
        }
    }

    /// Map for an STFT with `hop`/`win` samples seen through a squeeze into
    /// `channels` channels (`256/8 = 32`, `1024/8 = 128` with the defaults).
    pub fn for_squeezed(hop: usize, win: usize, channels: usize, dilation: usize) -> Self {
        Self::new(hop / channels, win / channels, dilation)
    }

    pub fn with_dilation(self, dilation: usize) -> Self {
        Self { dilation, ..self }
    }
}

/// One interval: the output positions it owns and the input positions its
/// convolution reads (clamped to the sequence).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interval {
    pub index: usize,
    pub output: Range<usize>,
    pub context: Range<usize>,
}

/// Split a sequence of length `len` into `num_frames` hop-aligned intervals.
pub fn split_intervals(
    len: usize,
    map: &IntervalMap,
    num_frames: usize,
    kernel_size: usize,
) -> Result<Vec<Interval>> {
    if map.frame_hop_elems == 0 || map.dilation == 0 {
        return Err(Error::shape("interval hop and dilation must be positive"));
    }
    if len != num_frames * map.frame_hop_elems {
        return Err(Error::shape(format!(
            "sequence length {len} != {num_frames} frames × {} elements",
            map.frame_hop_elems
        )));
    }
    let halo = map.dilation * (kernel_size.saturating_sub(1) / 2);
    Ok((0..num_frames)
        .map(|i| {
            let output = i * map.frame_hop_elems..(i + 1) * map.frame_hop_elems;
            let context = output.start.saturating_sub(halo)..(output.end + halo).min(len);
            Interval {
                index: i,
                output,
                context,
            }
        })
        .collect())
}

/// Saved activations `tanh(filter)` and `σ(gate)`, both `(out_ch, T)`.
#[derive(Clone, Debug)]
pub struct LvcActivations<T> {
    pub tanh_f: Tensor<T>,
    pub sig_g: Tensor<T>,
}

fn check_inputs<T: Real>(
    x: &Tensor<T>,
    k: &KernelSet<T>,
    map: &IntervalMap,
) -> Result<Vec<Interval>> {
    k.check()?;
    if x.shape().len() != 2 || x.dim(0) != k.in_ch() {
        return Err(Error::shape(format!(
            "input shape {:?} does not match kernel in_ch {}",
            x.shape(),
            k.in_ch()
        )));
    }
    split_intervals(x.dim(1), map, k.num_frames(), k.kernel_size())
}

fn centered_start(ks: usize, dilation: usize) -> isize {
    -((dilation * (ks / 2)) as isize)
}

fn preactivations<T: Real>(
    x: &Tensor<T>,
    k: &KernelSet<T>,
    map: &IntervalMap,
    intervals: &[Interval],
) -> (Tensor<T>, Tensor<T>) {
    let (out_ch, in_ch, ks) = (k.out_ch(), k.in_ch(), k.kernel_size());
    let len = x.dim(1);
    let fan = in_ch * ks;
    let cols = unfold(x, ks, map.dilation, centered_start(ks, map.dilation), len);
    let mut pf = Tensor::zeros(&[out_ch, len]);
    let mut pg = Tensor::zeros(&[out_ch, len]);
    for iv in intervals {
        let (i, t0, w) = (iv.index, iv.output.start, iv.output.len());
        for o in 0..out_ch {
            let bf = k.b_f.data()[i * out_ch + o];
            let bg = k.b_g.data()[i * out_ch + o];
            pf.row_mut(o)[iv.output.clone()]
                .iter_mut()
                .for_each(|v| *v = bf);
            pg.row_mut(o)[iv.output.clone()]
                .iter_mut()
                .for_each(|v| *v = bg);
        }
        let xb = MatRef::new(&cols.data()[t0..], fan, w, len);
        let kw = i * out_ch * fan..(i + 1) * out_ch * fan;
        for (weights, out) in [(&k.w_f, &mut pf), (&k.w_g, &mut pg)] {
            let wa = MatRef::new(&weights.data()[kw.clone()], out_ch, fan, fan);
            gemm(T::one(), wa, xb, T::one(), &mut out.data_mut()[t0..], len);
        }
    }
    (pf, pg)
}

/// Forward LVC, also returning the activations needed by the backward pass.
pub fn lvc_forward_with_activations<T: Real>(
    x: &Tensor<T>,
    k: &KernelSet<T>,
    map: &IntervalMap,
) -> Result<(Tensor<T>, LvcActivations<T>)> {
    let intervals = check_inputs(x, k, map)?;
    let (mut tf, mut sg) = preactivations(x, k, map, &intervals);
    tf.data_mut().iter_mut().for_each(|v| *v = v.tanh());
    sg.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    let mut z = tf.clone();
    for (zv, &g) in z.data_mut().iter_mut().zip(sg.data()) {
        *zv *= g;
    }
    Ok((
        z,
        LvcActivations {
            tanh_f: tf,
            sig_g: sg,
        },
    ))
}

/// Location-variable gated convolution, `(in_ch, T) → (out_ch, T)`.
pub fn lvc_forward<T: Real>(
    x: &Tensor<T>,
    k: &KernelSet<T>,
    map: &IntervalMap,
) -> Result<Tensor<T>> {
    lvc_forward_with_activations(x, k, map).map(|(z, _)| z)
}

/// Reverse-mode adjoint of [`lvc_forward`] using saved activations.
pub fn lvc_backward_with_activations<T: Real>(
    x: &Tensor<T>,
    k: &KernelSet<T>,
    map: &IntervalMap,
    act: &LvcActivations<T>,
    grad_z: &Tensor<T>,
) -> Result<(Tensor<T>, KernelSet<T>)> {
    let intervals = check_inputs(x, k, map)?;
    let (out_ch, in_ch, ks) = (k.out_ch(), k.in_ch(), k.kernel_size());
    let len = x.dim(1);
    if grad_z.shape() != [out_ch, len] || act.tanh_f.shape() != [out_ch, len] {
        return Err(Error::shape(format!(
            "upstream gradient shape {:?} != ({out_ch}, {len})",
            grad_z.shape()
        )));
    }
    // gradients w.r.t. the filter and gate pre-activations
    let mut gf = grad_z.clone();
    let mut gg = grad_z.clone();
    for (((f, g), &t), &s) in gf
        .data_mut()
        .iter_mut()
        .zip(gg.data_mut().iter_mut())
        .zip(act.tanh_f.data())
        .zip(act.sig_g.data())
    {
        let gz = *f;
        *f = gz * s * (T::one() - t * t);
        *g = gz * t * s * (T::one() - s);
    }

    let fan = in_ch * ks;
    let cols = unfold(x, ks, map.dilation, centered_start(ks, map.dilation), len);
    let mut gcols = Tensor::zeros(&[fan, len]);
    let mut gk = KernelSet::zeros(k.num_frames(), out_ch, in_ch, ks);
    for iv in &intervals {
        let (i, t0, w) = (iv.index, iv.output.start, iv.output.len());
        for o in 0..out_ch {
            gk.b_f.data_mut()[i * out_ch + o] = gf.row(o)[iv.output.clone()].iter().copied().sum();
            gk.b_g.data_mut()[i * out_ch + o] = gg.row(o)[iv.output.clone()].iter().copied().sum();
        }
        let kw = i * out_ch * fan..(i + 1) * out_ch * fan;
        let xt = MatRef::t(&cols.data()[t0..], w, fan, len);
        let gfb = MatRef::new(&gf.data()[t0..], out_ch, w, len);
        let ggb = MatRef::new(&gg.data()[t0..], out_ch, w, len);
        gemm(
            T::one(),
            gfb,
            xt,
            T::zero(),
            &mut gk.w_f.data_mut()[kw.clone()],
            fan,
        );
        gemm(
            T::one(),
            ggb,
            xt,
            T::zero(),
            &mut gk.w_g.data_mut()[kw.clone()],
            fan,
        );
        let wft = MatRef::t(&k.w_f.data()[kw.clone()], fan, out_ch, fan);
        let wgt = MatRef::t(&k.w_g.data()[kw], fan, out_ch, fan);
        let dst = &mut gcols.data_mut()[t0..];
        gemm(T::one(), wft, gfb, T::zero(), dst, len);
        gemm(T::one(), wgt, ggb, T::one(), dst, len);
    }
    let gx = fold(
        &gcols,
        in_ch,
        len,
        ks,
        map.dilation,
        centered_start(ks, map.dilation),
    );
    Ok((gx, gk))
}

/// Gradients of `⟨grad_z, lvc_forward(x, k)⟩` with respect to `x` and every
/// tensor of `k`.
pub fn lvc_backward<T: Real>(
    x: &Tensor<T>,
    k: &KernelSet<T>,
    map: &IntervalMap,
    grad_z: &Tensor<T>,
) -> Result<(Tensor<T>, KernelSet<T>)> {
    let (_, act) = lvc_forward_with_activations(x, k, map)?;
    lvc_backward_with_activations(x, k, map, &act, grad_z)
}
