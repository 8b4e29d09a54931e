//! Kernel-predictor hypernetwork.
//!
//! Maps a log-mel spectrogram to one [`KernelSet`] per LVC layer:
//!
//! ```text
//! mel ─ conv(k=2, valid) ─ tanh ─┬─ [conv ─ BN ─ tanh ─ conv ─ BN ─ tanh] ─(+)─ … ─ linear ─ reshape
//!                                └──────────────────────────────────────────┘
//! ```
//!
//! The unpadded width-2 entry convolution drops one frame, so `F` mel frames
//! yield `F - 1` kernel frames, one per hop of the (hop-aligned) waveform.
//! Batch normalisation uses statistics over the whole batch and all frames in
//! [`Mode::Train`] and running statistics in [`Mode::Eval`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::frontend::MelSpectrogram;
use crate::gemm::{fold, gemm, unfold, MatRef};
use crate::lvc::KernelSet;
use crate::params::{join, ParamSet};
use crate::{Error, Real, Result, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Width of the unpadded entry convolution.
pub const ENTRY_KERNEL: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelPredictorConfig {
    pub hidden_ch: usize,
    pub residual_blocks: usize,
    pub kp_kernel_size: usize,
}

impl Default for KernelPredictorConfig {
    fn default() -> Self {
        Self {
            hidden_ch: 64,
            residual_blocks: 3,
            kp_kernel_size: 3,
        }
    }
}

impl KernelPredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_ch == 0 || self.residual_blocks == 0 {
            return Err(Error::config(
                "kernel predictor needs hidden_ch ≥ 1 and residual_blocks ≥ 1",
            ));
        }
        if self.kp_kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!(
                "kp_kernel_size {} must be odd",
                self.kp_kernel_size
            )));
        }
        Ok(())
    }
}

/// Shape of one LVC layer fed by the predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelTarget {
    pub layer_id: usize,
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel_size: usize,
}

impl KernelTarget {
    pub fn coeffs(&self) -> usize {
        KernelSet::<f64>::coeffs_per_frame(self.out_ch, self.in_ch, self.kernel_size)
    }
}

pub fn total_coeff_count(targets: &[KernelTarget]) -> usize {
    targets.iter().map(KernelTarget::coeffs).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d<T> {
    /// `(out, in, kernel)`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Conv1d<T> {
    fn init<R: Rng + ?Sized>(out_ch: usize, in_ch: usize, k: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((in_ch * k) as f64).sqrt();
        Self {
            weight: Tensor::from_fn(&[out_ch, in_ch, k], |_| {
                T::of(rng.random_range(-bound..bound))
            }),
            bias: Tensor::from_fn(&[out_ch], |_| T::of(rng.random_range(-bound..bound))),
        }
    }

    pub fn cast<U: Real>(&self) -> Conv1d<U> {
        Conv1d {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }

    /// `x: (in, L)` → `(out, L + 2·pad − K + 1)`.
    fn forward(&self, x: &Tensor<T>, pad: usize) -> Tensor<T> {
        let (oc, ic, k) = (self.weight.dim(0), self.weight.dim(1), self.weight.dim(2));
        let out_len = x.dim(1) + 2 * pad + 1 - k;
        let cols = unfold(x, k, 1, -(pad as isize), out_len);
        let mut y = Tensor::zeros(&[oc, out_len]);
        for o in 0..oc {
            let b = self.bias.data()[o];
            y.row_mut(o).iter_mut().for_each(|v| *v = b);
        }
        let w = MatRef::new(self.weight.data(), oc, ic * k, ic * k);
        gemm(
            T::one(),
            w,
            MatRef::new(cols.data(), ic * k, out_len, out_len),
            T::one(),
            y.data_mut(),
            out_len,
        );
        y
    }

    /// Accumulate parameter gradients into `grad` and return `∂L/∂x`.
    fn backward(
        &self,
        x: &Tensor<T>,
        pad: usize,
        gy: &Tensor<T>,
        grad: &mut Conv1d<T>,
    ) -> Tensor<T> {
        let (oc, ic, k) = (self.weight.dim(0), self.weight.dim(1), self.weight.dim(2));
        let out_len = gy.dim(1);
        let fan = ic * k;
        for o in 0..oc {
            grad.bias.data_mut()[o] += gy.row(o).iter().copied().sum();
        }
        let cols = unfold(x, k, 1, -(pad as isize), out_len);
        let g = MatRef::new(gy.data(), oc, out_len, out_len);
        gemm(
            T::one(),
            g,
            MatRef::t(cols.data(), out_len, fan, out_len),
            T::one(),
            grad.weight.data_mut(),
            fan,
        );
        let mut gcols = Tensor::zeros(&[fan, out_len]);
        gemm(
            T::one(),
            MatRef::t(self.weight.data(), fan, oc, fan),
            g,
            T::zero(),
            gcols.data_mut(),
            out_len,
        );
        fold(&gcols, ic, x.dim(1), k, 1, -(pad as isize))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

/// Per-channel statistics of one batch-norm call.
#[derive(Clone, Debug)]
struct BnStats<T> {
    mean: Vec<T>,
    var: Vec<T>,
    count: usize,
}

impl<T: Real> BatchNorm<T> {
    fn new(ch: usize) -> Self {
        Self {
            gamma: Tensor::from_fn(&[ch], |_| T::one()),
            beta: Tensor::zeros(&[ch]),
            running_mean: Tensor::zeros(&[ch]),
            running_var: Tensor::from_fn(&[ch], |_| T::one()),
        }
    }

    pub fn cast<U: Real>(&self) -> BatchNorm<U> {
        BatchNorm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            gamma: self.gamma.zeros_like(),
            beta: self.beta.zeros_like(),
            running_mean: self.running_mean.zeros_like(),
            running_var: self.running_var.zeros_like(),
        }
    }

    fn batch_stats(xs: &[Tensor<T>]) -> BnStats<T> {
        let ch = xs[0].dim(0);
        let count: usize = xs.iter().map(|x| x.dim(1)).sum();
        let n = T::of(count as f64);
        let mut mean = vec![T::zero(); ch];
        let mut var = vec![T::zero(); ch];
        for c in 0..ch {
            let s: T = xs.iter().map(|x| x.row(c).iter().copied().sum::<T>()).sum();
            let m = s / n;
            let v: T = xs
                .iter()
                .map(|x| x.row(c).iter().map(|&v| (v - m) * (v - m)).sum::<T>())
                .sum();
            mean[c] = m;
            var[c] = v / n;
        }
        BnStats { mean, var, count }
    }

    /// Normalise every item with either the batch statistics or the running
    /// ones; returns the normalised-but-unscaled `x̂` per item and the
    /// inverse standard deviations.
    fn normalize(&self, xs: &[Tensor<T>], stats: Option<&BnStats<T>>) -> (Vec<Tensor<T>>, Vec<T>) {
        let ch = xs[0].dim(0);
        let eps = T::of(BN_EPS);
        let (mean, var): (Vec<T>, Vec<T>) = match stats {
            Some(s) => (s.mean.clone(), s.var.clone()),
            None => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat = xs
            .iter()
            .map(|x| {
                let mut h = x.clone();
                for c in 0..ch {
                    let (m, is) = (mean[c], inv_std[c]);
                    h.row_mut(c).iter_mut().for_each(|v| *v = (*v - m) * is);
                }
                h
            })
            .collect();
        (xhat, inv_std)
    }

    fn affine(&self, xhat: &Tensor<T>) -> Tensor<T> {
        let mut y = xhat.clone();
        for c in 0..y.dim(0) {
            let (g, b) = (self.gamma.data()[c], self.beta.data()[c]);
            y.row_mut(c).iter_mut().for_each(|v| *v = *v * g + b);
        }
        y
    }

    /// Backward through batch statistics (train mode).
    fn backward(
        &self,
        xhat: &[Tensor<T>],
        inv_std: &[T],
        gy: &[Tensor<T>],
        grad: &mut BatchNorm<T>,
    ) -> Vec<Tensor<T>> {
        let ch = xhat[0].dim(0);
        let count: usize = xhat.iter().map(|x| x.dim(1)).sum();
        let n = T::of(count as f64);
        let mut sum_g = vec![T::zero(); ch];
        let mut sum_gx = vec![T::zero(); ch];
        for (xh, g) in xhat.iter().zip(gy) {
            for c in 0..ch {
                for (&a, &b) in xh.row(c).iter().zip(g.row(c)) {
                    sum_g[c] += b;
                    sum_gx[c] += a * b;
                }
            }
        }
        for c in 0..ch {
            grad.gamma.data_mut()[c] += sum_gx[c];
            grad.beta.data_mut()[c] += sum_g[c];
        }
        xhat.iter()
            .zip(gy)
            .map(|(xh, g)| {
                let mut gx = g.clone();
                for c in 0..ch {
                    let k = self.gamma.data()[c] * inv_std[c] / n;
                    for (d, &a) in gx.row_mut(c).iter_mut().zip(xh.row(c)) {
                        *d = k * (n * *d - sum_g[c] - a * sum_gx[c]);
                    }
                }
                gx
            })
            .collect()
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<T> {
    pub conv1: Conv1d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv1d<T>,
    pub bn2: BatchNorm<T>,
}

/// Parameters of one kernel predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelPredictor<T> {
    pub config: KernelPredictorConfig,
    pub num_mels: usize,
    pub targets: Vec<KernelTarget>,
    pub entry: Conv1d<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    /// `(total_coeffs, hidden_ch)`
    pub out_weight: Tensor<T>,
    pub out_bias: Tensor<T>,
}

/// Intermediate values of one residual block, per batch item.
struct BlockCache<T> {
    input: Vec<Tensor<T>>,
    xhat1: Vec<Tensor<T>>,
    inv_std1: Vec<T>,
    stats1: Option<BnStats<T>>,
    t1: Vec<Tensor<T>>,
    xhat2: Vec<Tensor<T>>,
    inv_std2: Vec<T>,
    stats2: Option<BnStats<T>>,
    t2: Vec<Tensor<T>>,
}

/// Kernel sets indexed `[item][layer]`.
pub type StepKernelSets<T> = Vec<Vec<KernelSet<T>>>;

/// Everything [`KernelPredictor::backward`] needs from a forward pass.
pub struct PredictorCache<T> {
    mode: Mode,
    mels: Vec<Tensor<T>>,
    entry_out: Vec<Tensor<T>>,
    blocks: Vec<BlockCache<T>>,
    features: Vec<Tensor<T>>,
}

/// Mel spectrogram as a `(num_mels, frames)` tensor.
pub fn mel_tensor<T: Real>(mel: &MelSpectrogram) -> Tensor<T> {
    let (f, m) = (mel.num_frames, mel.num_mels);
    let mut t = Tensor::zeros(&[m, f]);
    for i in 0..f {
        for (c, &v) in mel.frame(i).iter().enumerate() {
            t.data_mut()[c * f + i] = T::of(v);
        }
    }
    t
}

fn tanh_in_place<T: Real>(t: &mut Tensor<T>) {
    t.data_mut().iter_mut().for_each(|v| *v = v.tanh());
}

/// `g ⊙ (1 − y²)` for `y = tanh(·)`.
fn tanh_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let mut out = g.clone();
    for (o, &yv) in out.data_mut().iter_mut().zip(y.data()) {
        *o *= T::one() - yv * yv;
    }
    out
}

impl<T: Real> KernelPredictor<T> {
    pub fn new<R: Rng + ?Sized>(
        config: &KernelPredictorConfig,
        num_mels: usize,
        targets: Vec<KernelTarget>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_ch;
        let k = config.kp_kernel_size;
        let entry = Conv1d::init(h, num_mels, ENTRY_KERNEL, rng);
        let blocks = (0..config.residual_blocks)
            .map(|_| ResidualBlock {
                conv1: Conv1d::init(h, h, k, rng),
                bn1: BatchNorm::new(h),
                conv2: Conv1d::init(h, h, k, rng),
                bn2: BatchNorm::new(h),
            })
            .collect();
        let total = total_coeff_count(&targets);
        Ok(Self {
            config: config.clone(),
            num_mels,
            targets,
            entry,
            blocks,
            out_weight: Tensor::zeros(&[total, h]),
            out_bias: Tensor::zeros(&[total]),
        })
    }

    /// Same structure, all tensors zero (used as a gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            num_mels: self.num_mels,
            targets: self.targets.clone(),
            entry: self.entry.zeros_like(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResidualBlock {
                    conv1: b.conv1.zeros_like(),
                    bn1: b.bn1.zeros_like(),
                    conv2: b.conv2.zeros_like(),
                    bn2: b.bn2.zeros_like(),
                })
                .collect(),
            out_weight: self.out_weight.zeros_like(),
            out_bias: self.out_bias.zeros_like(),
        }
    }

    pub fn cast<U: Real>(&self) -> KernelPredictor<U> {
        KernelPredictor {
            config: self.config.clone(),
            num_mels: self.num_mels,
            targets: self.targets.clone(),
            entry: self.entry.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResidualBlock {
                    conv1: b.conv1.cast(),
                    bn1: b.bn1.cast(),
                    conv2: b.conv2.cast(),
                    bn2: b.bn2.cast(),
                })
                .collect(),
            out_weight: self.out_weight.cast(),
            out_bias: self.out_bias.cast(),
        }
    }

    pub fn total_coeffs(&self) -> usize {
        self.out_weight.dim(0)
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(
        config: &KernelPredictorConfig,
        num_mels: usize,
        targets: &[KernelTarget],
    ) -> usize {
        let h = config.hidden_ch;
        let entry = h * num_mels * ENTRY_KERNEL + h;
        let per_conv = h * h * config.kp_kernel_size + h;
        let per_bn = 2 * h;
        let blocks = config.residual_blocks * 2 * (per_conv + per_bn);
        let out = total_coeff_count(targets) * (h + 1);
        entry + blocks + out
    }

    fn check_mels(&self, mels: &[Tensor<T>]) -> Result<()> {
        if mels.is_empty() {
            return Err(Error::EmptyInput("empty mel batch".into()));
        }
        let frames = mels[0].dim(1);
        for m in mels {
            if m.dim(0) != self.num_mels {
                return Err(Error::shape(format!(
                    "mel has {} channels, predictor expects {}",
                    m.dim(0),
                    self.num_mels
                )));
            }
            if m.dim(1) < ENTRY_KERNEL {
                return Err(Error::InputTooShort(format!(
                    "kernel predictor needs at least 2 mel frames, got {}",
                    m.dim(1)
                )));
            }
            if m.dim(1) != frames {
                return Err(Error::shape(
                    "all mels in a batch must have the same frame count",
                ));
            }
        }
        Ok(())
    }

    /// Hidden features `(hidden_ch, frames − 1)` per batch item plus the cache.
    fn features(&self, mels: &[Tensor<T>], mode: Mode) -> Result<PredictorCache<T>> {
        self.check_mels(mels)?;
        let entry_out: Vec<Tensor<T>> = mels
            .iter()
            .map(|m| {
                let mut a = self.entry.forward(m, 0);
                tanh_in_place(&mut a);
                a
            })
            .collect();
        let pad = self.config.kp_kernel_size / 2;
        let mut cur = entry_out.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let c1: Vec<_> = cur.iter().map(|x| blk.conv1.forward(x, pad)).collect();
            let stats1 = (mode == Mode::Train).then(|| BatchNorm::batch_stats(&c1));
            let (xhat1, inv_std1) = blk.bn1.normalize(&c1, stats1.as_ref());
            let t1: Vec<_> = xhat1
                .iter()
                .map(|xh| {
                    let mut y = blk.bn1.affine(xh);
                    tanh_in_place(&mut y);
                    y
                })
                .collect();
            let c2: Vec<_> = t1.iter().map(|x| blk.conv2.forward(x, pad)).collect();
            let stats2 = (mode == Mode::Train).then(|| BatchNorm::batch_stats(&c2));
            let (xhat2, inv_std2) = blk.bn2.normalize(&c2, stats2.as_ref());
            let t2: Vec<_> = xhat2
                .iter()
                .map(|xh| {
                    let mut y = blk.bn2.affine(xh);
                    tanh_in_place(&mut y);
                    y
                })
                .collect();
            let next: Vec<_> = cur
                .iter()
                .zip(&t2)
                .map(|(x, t)| {
                    let mut y = x.clone();
                    y.add_assign(t);
                    y
                })
                .collect();
            caches.push(BlockCache {
                input: std::mem::replace(&mut cur, next),
                xhat1,
                inv_std1,
                stats1,
                t1,
                xhat2,
                inv_std2,
                stats2,
                t2,
            });
        }
        Ok(PredictorCache {
            mode,
            mels: mels.to_vec(),
            entry_out,
            blocks: caches,
            features: cur,
        })
    }

    fn reshape(&self, coeffs: &Tensor<T>) -> Vec<KernelSet<T>> {
        let frames = coeffs.dim(1);
        let mut row = 0;
        self.targets
            .iter()
            .map(|tg| {
                let (o, i, k) = (tg.out_ch, tg.in_ch, tg.kernel_size);
                let w = o * i * k;
                let mut ks = KernelSet::zeros(frames, o, i, k);
                for f in 0..frames {
                    for r in 0..w {
                        ks.w_f.data_mut()[f * w + r] = coeffs.data()[(row + r) * frames + f];
                        ks.w_g.data_mut()[f * w + r] = coeffs.data()[(row + w + r) * frames + f];
                    }
                    for r in 0..o {
                        ks.b_f.data_mut()[f * o + r] =
                            coeffs.data()[(row + 2 * w + r) * frames + f];
                        ks.b_g.data_mut()[f * o + r] =
                            coeffs.data()[(row + 2 * w + o + r) * frames + f];
                    }
                }
                row += tg.coeffs();
                ks
            })
            .collect()
    }

    fn unreshape(&self, grads: &[KernelSet<T>], frames: usize) -> Tensor<T> {
        let mut g = Tensor::zeros(&[self.total_coeffs(), frames]);
        let mut row = 0;
        for (tg, ks) in self.targets.iter().zip(grads) {
            let (o, i, k) = (tg.out_ch, tg.in_ch, tg.kernel_size);
            let w = o * i * k;
            for f in 0..frames {
                for r in 0..w {
                    g.data_mut()[(row + r) * frames + f] = ks.w_f.data()[f * w + r];
                    g.data_mut()[(row + w + r) * frames + f] = ks.w_g.data()[f * w + r];
                }
                for r in 0..o {
                    g.data_mut()[(row + 2 * w + r) * frames + f] = ks.b_f.data()[f * o + r];
                    g.data_mut()[(row + 2 * w + o + r) * frames + f] = ks.b_g.data()[f * o + r];
                }
            }
            row += tg.coeffs();
        }
        g
    }

    fn output_linear(&self, feat: &Tensor<T>) -> Tensor<T> {
        let (rows, h) = (self.out_weight.dim(0), self.out_weight.dim(1));
        let frames = feat.dim(1);
        let mut y = Tensor::zeros(&[rows, frames]);
        for r in 0..rows {
            let b = self.out_bias.data()[r];
            y.row_mut(r).iter_mut().for_each(|v| *v = b);
        }
        let w = MatRef::new(self.out_weight.data(), rows, h, h);
        gemm(
            T::one(),
            w,
            MatRef::new(feat.data(), h, frames, frames),
            T::one(),
            y.data_mut(),
            frames,
        );
        y
    }

    /// Predict one kernel set per target layer for every mel in the batch.
    /// Mels are `(num_mels, frames)` tensors (see [`mel_tensor`]).
    pub fn predict(
        &self,
        mels: &[Tensor<T>],
        mode: Mode,
    ) -> Result<(StepKernelSets<T>, PredictorCache<T>)> {
        let cache = self.features(mels, mode)?;
        let kernels = cache
            .features
            .iter()
            .map(|feat| self.reshape(&self.output_linear(feat)))
            .collect();
        Ok((kernels, cache))
    }

    /// Fold the batch statistics of a train-mode pass into the running
    /// statistics (momentum [`BN_MOMENTUM`], unbiased variance).
    pub fn commit_running_stats(&mut self, cache: &PredictorCache<T>) {
        let m = T::of(BN_MOMENTUM);
        for (blk, bc) in self.blocks.iter_mut().zip(&cache.blocks) {
            for (bn, stats) in [(&mut blk.bn1, &bc.stats1), (&mut blk.bn2, &bc.stats2)] {
                let Some(s) = stats else { continue };
                let n = s.count as f64;
                let unbias = T::of(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
                for c in 0..s.mean.len() {
                    let rm = &mut bn.running_mean.data_mut()[c];
                    *rm = (T::one() - m) * *rm + m * s.mean[c];
                    let rv = &mut bn.running_var.data_mut()[c];
                    *rv = (T::one() - m) * *rv + m * s.var[c] * unbias;
                }
            }
        }
    }

    /// Adjoint of a train-mode [`predict`](Self::predict): given `∂L/∂kernels`
    /// per batch item, return parameter gradients (running-stat slots stay
    /// zero) and `∂L/∂mel` per item.
    pub fn backward(
        &self,
        cache: &PredictorCache<T>,
        grad_kernels: &[Vec<KernelSet<T>>],
    ) -> Result<(KernelPredictor<T>, Vec<Tensor<T>>)> {
        if cache.mode != Mode::Train {
            return Err(Error::config(
                "kernel predictor backward requires a train-mode forward",
            ));
        }
        if grad_kernels.len() != cache.features.len() {
            return Err(Error::shape(
                "gradient batch size differs from forward batch",
            ));
        }
        let mut grad = self.zeros_like();
        let h = self.config.hidden_ch;
        let rows = self.total_coeffs();
        let mut g_feat: Vec<Tensor<T>> = Vec::with_capacity(grad_kernels.len());
        for (gk, feat) in grad_kernels.iter().zip(&cache.features) {
            if gk.len() != self.targets.len() {
                return Err(Error::shape(
                    "one kernel gradient per target layer expected",
                ));
            }
            let frames = feat.dim(1);
            let gy = self.unreshape(gk, frames);
            for r in 0..rows {
                grad.out_bias.data_mut()[r] += gy.row(r).iter().copied().sum();
            }
            let g = MatRef::new(gy.data(), rows, frames, frames);
            let ft = MatRef::t(feat.data(), frames, h, frames);
            gemm(T::one(), g, ft, T::one(), grad.out_weight.data_mut(), h);
            let mut gf = Tensor::zeros(&[h, frames]);
            let wt = MatRef::t(self.out_weight.data(), h, rows, h);
            gemm(T::one(), wt, g, T::zero(), gf.data_mut(), frames);
            g_feat.push(gf);
        }

        let pad = self.config.kp_kernel_size / 2;
        let mut g = g_feat;
        for (b, (blk, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gblk = &mut grad.blocks[b];
            // e' = e + t2: the skip passes g straight through
            let g_n2: Vec<_> = bc
                .t2
                .iter()
                .zip(&g)
                .map(|(y, gg)| tanh_backward(y, gg))
                .collect();
            let g_c2 = blk
                .bn2
                .backward(&bc.xhat2, &bc.inv_std2, &g_n2, &mut gblk.bn2);
            let g_t1: Vec<_> = bc
                .t1
                .iter()
                .zip(&g_c2)
                .map(|(x, gy)| blk.conv2.backward(x, pad, gy, &mut gblk.conv2))
                .collect();
            let g_n1: Vec<_> = bc
                .t1
                .iter()
                .zip(&g_t1)
                .map(|(y, gg)| tanh_backward(y, gg))
                .collect();
            let g_c1 = blk
                .bn1
                .backward(&bc.xhat1, &bc.inv_std1, &g_n1, &mut gblk.bn1);
            for ((gi, x), gy) in g.iter_mut().zip(&bc.input).zip(&g_c1) {
                let gx = blk.conv1.backward(x, pad, gy, &mut gblk.conv1);
                gi.add_assign(&gx);
            }
        }
        let g_mel = cache
            .mels
            .iter()
            .zip(&cache.entry_out)
            .zip(&g)
            .map(|((m, e), gg)| {
                let ga = tanh_backward(e, gg);
                self.entry.backward(m, 0, &ga, &mut grad.entry)
            })
            .collect();
        Ok((grad, g_mel))
    }
}

impl<T: Real> ParamSet<T> for KernelPredictor<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.entry.visit(&join(prefix, "entry"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            b.conv1.visit(&join(&p, "conv1"), f);
            b.bn1.visit(&join(&p, "bn1"), f);
            b.conv2.visit(&join(&p, "conv2"), f);
            b.bn2.visit(&join(&p, "bn2"), f);
        }
        f(join(prefix, "out.weight"), &self.out_weight);
        f(join(prefix, "out.bias"), &self.out_bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.entry.visit_mut(&join(prefix, "entry"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            b.conv1.visit_mut(&join(&p, "conv1"), f);
            b.bn1.visit_mut(&join(&p, "bn1"), f);
            b.conv2.visit_mut(&join(&p, "conv2"), f);
            b.bn2.visit_mut(&join(&p, "bn2"), f);
        }
        f(join(prefix, "out.weight"), &mut self.out_weight);
        f(join(prefix, "out.bias"), &mut self.out_bias);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            f(join(&p, "bn1.running_mean"), &b.bn1.running_mean);
            f(join(&p, "bn1.running_var"), &b.bn1.running_var);
            f(join(&p, "bn2.running_mean"), &b.bn2.running_mean);
            f(join(&p, "bn2.running_var"), &b.bn2.running_var);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            f(join(&p, "bn1.running_mean"), &mut b.bn1.running_mean);
            f(join(&p, "bn1.running_var"), &mut b.bn1.running_var);
            f(join(&p, "bn2.running_mean"), &mut b.bn2.running_mean);
            f(join(&p, "bn2.running_var"), &mut b.bn2.running_var);
        }
    }
}

#[cfg(test)]
mod tests;
