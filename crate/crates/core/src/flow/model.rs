//! The flow itself: parameters, forward/inverse passes and the likelihood
//! gradient.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::config::{FlowConfig, LOG_SCALE_CLAMP};
use crate::frontend::{squeeze, unsqueeze, SqueezedSignal};
use crate::gemm::{gemm, MatRef};
use crate::linalg::{random_orthogonal, Lu};
use crate::lvc::{
    lvc_backward_with_activations, lvc_forward_with_activations, IntervalMap, KernelSet,
    LvcActivations,
};
use crate::params::{join, ParamSet};
use crate::predictor::{KernelPredictor, Mode, PredictorCache};
use crate::{Error, Real, Result, Tensor};

/// Position-wise linear map `(in, T) → (out, T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection<T> {
    /// `(out, in)`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Projection<T> {
    pub fn zeros(out_ch: usize, in_ch: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_ch, in_ch]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn cast<U: Real>(&self) -> Projection<U> {
        Projection {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    fn init<R: Rng + ?Sized>(out_ch: usize, in_ch: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_ch as f64).sqrt();
        Self {
            weight: Tensor::from_fn(&[out_ch, in_ch], |_| T::of(rng.random_range(-bound..bound))),
            bias: Tensor::from_fn(&[out_ch], |_| T::of(rng.random_range(-bound..bound))),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (oc, ic) = (self.weight.dim(0), self.weight.dim(1));
        let len = x.dim(1);
        let mut y = Tensor::zeros(&[oc, len]);
        for o in 0..oc {
            let b = self.bias.data()[o];
            y.row_mut(o).iter_mut().for_each(|v| *v = b);
        }
        let w = MatRef::new(self.weight.data(), oc, ic, ic);
        gemm(
            T::one(),
            w,
            MatRef::new(x.data(), ic, len, len),
            T::one(),
            y.data_mut(),
            len,
        );
        y
    }

    /// Accumulate parameter gradients into `grad`; return `∂L/∂x`.
    pub fn backward(&self, x: &Tensor<T>, gy: &Tensor<T>, grad: &mut Projection<T>) -> Tensor<T> {
        let (oc, ic) = (self.weight.dim(0), self.weight.dim(1));
        let len = x.dim(1);
        for o in 0..oc {
            grad.bias.data_mut()[o] += gy.row(o).iter().copied().sum();
        }
        let g = MatRef::new(gy.data(), oc, len, len);
        gemm(
            T::one(),
            g,
            MatRef::t(x.data(), len, ic, len),
            T::one(),
            grad.weight.data_mut(),
            ic,
        );
        let mut gx = Tensor::zeros(&[ic, len]);
        gemm(
            T::one(),
            MatRef::t(self.weight.data(), ic, oc, ic),
            g,
            T::zero(),
            gx.data_mut(),
            len,
        );
        gx
    }
}

/// One flow step: channel mixing followed by an LVC affine coupling.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowStep<T> {
    /// `(C, C)` channel-mixing matrix.
    pub inv_conv: Tensor<T>,
    pub predictor: KernelPredictor<T>,
    /// `x_a` channels → LVC channels.
    pub in_proj: Projection<T>,
    /// LVC channels → `(s, b)` for the `x_b` channels; zero-initialised.
    pub out_proj: Projection<T>,
}

impl<T: Real> FlowStep<T> {
    pub fn channels(&self) -> usize {
        self.inv_conv.dim(0)
    }

    /// Channels passed through unchanged (`ceil(C / 2)`).
    pub fn cond_channels(&self) -> usize {
        self.channels().div_ceil(2)
    }

    fn zeros_like(&self) -> Self {
        Self {
            inv_conv: self.inv_conv.zeros_like(),
            predictor: self.predictor.zeros_like(),
            in_proj: Projection::zeros(self.in_proj.weight.dim(0), self.in_proj.weight.dim(1)),
            out_proj: Projection::zeros(self.out_proj.weight.dim(0), self.out_proj.weight.dim(1)),
        }
    }
}

/// Latent variables: the early outputs in emission order, then the channels
/// left after the last step. Every segment is `(channels, T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector<T> {
    pub segments: Vec<Tensor<T>>,
}

impl<T: Real> LatentVector<T> {
    pub fn num_elements(&self) -> usize {
        self.segments.iter().map(Tensor::len).sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.segments
            .iter()
            .flat_map(|s| s.data())
            .map(|v| {
                let v = v.to_f64_lossy();
                v * v
            })
            .sum()
    }
}

/// Result of a forward pass over one waveform.
#[derive(Clone, Debug)]
pub struct FlowOutput<T> {
    pub latent: LatentVector<T>,
    pub log_det_total: f64,
    /// Negative log-likelihood per element in nats.
    pub nll: f64,
}

impl<T> FlowOutput<T> {
    pub fn bits_per_dim(&self) -> f64 {
        self.nll / std::f64::consts::LN_2
    }
}

/// Per-element negative log-likelihood of `z` under `N(0, σ²)` combined with
/// the flow's log-determinant.
pub fn nll_per_element(sum_sq: f64, num_elements: usize, log_det: f64, sigma: f64) -> f64 {
    let n = num_elements as f64;
    let var = sigma * sigma;
    (sum_sq / (2.0 * var) + 0.5 * n * (2.0 * PI * var).ln() - log_det) / n
}

/// Kernels for one item: `[step][layer]`.
pub type StepKernels<T> = Vec<Vec<KernelSet<T>>>;

/// Kernels indexed `[item][step][layer]` and one predictor cache per step.
type KernelsAndCaches<T> = (Vec<StepKernels<T>>, Vec<PredictorCache<T>>);

/// `(s_raw, b, hidden states, LVC activations)` of one coupling network.
type CouplingOutput<T> = (Tensor<T>, Tensor<T>, Vec<Tensor<T>>, Vec<LvcActivations<T>>);

/// Per-item loss, parameter gradient and kernel gradient.
type ItemGrad<T> = (f64, MelGlow<T>, StepKernels<T>);

struct StepTrace<T> {
    x_in: Tensor<T>,
    y: Tensor<T>,
    hs: Vec<Tensor<T>>,
    acts: Vec<LvcActivations<T>>,
    s_raw: Tensor<T>,
}

/// Gradient of a batch loss together with what the caller needs to finish a
/// training step.
pub struct BatchGradient<T> {
    /// Mean per-element NLL over the batch.
    pub loss: f64,
    pub item_nll: Vec<f64>,
    /// Same structure as the model.
    pub grad: MelGlow<T>,
    pub predictor_caches: Vec<PredictorCache<T>>,
}

/// The normalizing-flow vocoder.
#[derive(Clone, Debug, PartialEq)]
pub struct MelGlow<T> {
    pub config: FlowConfig,
    pub steps: Vec<FlowStep<T>>,
}

impl<T: Real> MelGlow<T> {
    /// Fresh model: random orthogonal mixing matrices, random predictor and
    /// input projections, zero output projections (so every coupling starts
    /// as the identity).
    pub fn new<R: Rng + ?Sized>(config: &FlowConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let targets = config.kernel_targets();
        let mut steps = Vec::with_capacity(config.n_flows);
        for &c in &config.channel_schedule() {
            let w = random_orthogonal(c, rng);
            let inv_conv = Tensor::from_vec(&[c, c], w.into_iter().map(T::of).collect())?;
            let predictor =
                KernelPredictor::new(&config.kp, config.stft.num_mels, targets.clone(), rng)?;
            let (na, nb) = (c.div_ceil(2), c / 2);
            steps.push(FlowStep {
                inv_conv,
                predictor,
                in_proj: Projection::init(config.lvc_channels, na, rng),
                out_proj: Projection::zeros(2 * nb, config.lvc_channels),
            });
        }
        Ok(Self {
            config: config.clone(),
            steps,
        })
    }

    /// Same structure with every tensor zeroed, for gradient accumulation.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            steps: self.steps.iter().map(FlowStep::zeros_like).collect(),
        }
    }

    /// Replace the zero-initialised output layers (predictor output linear
    /// and coupling output projection) with small random values so that
    /// every coupling is active. Used by tests and verification suites.
    pub fn randomize_output_layers<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        for step in &mut self.steps {
            let fan_in = step.out_proj.weight.dim(1) as f64;
            for t in [&mut step.out_proj.weight, &mut step.out_proj.bias] {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = T::of(scale * rng.random_range(-1.0..1.0) / fan_in.sqrt()));
            }
            let h = step.predictor.config.hidden_ch as f64;
            for t in [&mut step.predictor.out_weight, &mut step.predictor.out_bias] {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = T::of(scale * rng.random_range(-1.0..1.0) / h.sqrt()));
            }
        }
    }

    pub fn cast<U: Real>(&self) -> MelGlow<U> {
        MelGlow {
            config: self.config.clone(),
            steps: self
                .steps
                .iter()
                .map(|s| FlowStep {
                    inv_conv: s.inv_conv.cast(),
                    predictor: s.predictor.cast(),
                    in_proj: s.in_proj.cast(),
                    out_proj: s.out_proj.cast(),
                })
                .collect(),
        }
    }

    fn interval_map(&self, layer: usize) -> IntervalMap {
        let c = &self.config;
        IntervalMap::for_squeezed(
            c.stft.hop_length,
            c.stft.win_length,
            c.squeeze_channels,
            c.dilation(layer),
        )
    }

    /// Squeeze a waveform whose length is a whole number of hops.
    pub fn squeeze_waveform(&self, samples: &[T]) -> Result<SqueezedSignal<T>> {
        let hop = self.config.stft.hop_length;
        if samples.is_empty() || !samples.len().is_multiple_of(hop) {
            return Err(Error::shape(format!(
                "waveform length {} is not a positive multiple of hop_length {hop}",
                samples.len()
            )));
        }
        squeeze(samples, self.config.squeeze_channels)
    }

    /// Number of kernel frames (mel frames − 1) required for `steps`
    /// squeezed time steps.
    fn check_alignment(&self, steps: usize, mel: &Tensor<T>) -> Result<()> {
        let hop_elems = self.config.frame_hop_elems();
        let frames = mel.dim(1);
        if frames < 2 || (frames - 1) * hop_elems != steps {
            return Err(Error::shape(format!(
                "{frames} mel frames condition {} squeezed steps, got {steps}",
                frames.saturating_sub(1) * hop_elems
            )));
        }
        Ok(())
    }

    /// Run every step's kernel predictor on a batch of `(num_mels, frames)`
    /// mels. Returns kernels indexed `[item][step][layer]` and one predictor
    /// cache per step.
    pub fn predict_kernels(&self, mels: &[Tensor<T>], mode: Mode) -> Result<KernelsAndCaches<T>> {
        let mut per_item: Vec<StepKernels<T>> =
            vec![Vec::with_capacity(self.steps.len()); mels.len()];
        let mut caches = Vec::with_capacity(self.steps.len());
        for step in &self.steps {
            let (kernels, cache) = step.predictor.predict(mels, mode)?;
            for (item, k) in per_item.iter_mut().zip(kernels) {
                item.push(k);
            }
            caches.push(cache);
        }
        Ok((per_item, caches))
    }

    /// Coupling network: `x_a → (s_raw, b)` plus the hidden states.
    fn coupling(
        &self,
        k: usize,
        x_a: &Tensor<T>,
        kernels: &[KernelSet<T>],
    ) -> Result<CouplingOutput<T>> {
        let step = &self.steps[k];
        let mut hs = Vec::with_capacity(kernels.len() + 1);
        let mut acts = Vec::with_capacity(kernels.len());
        hs.push(step.in_proj.forward(x_a));
        for (l, ks) in kernels.iter().enumerate() {
            let h = hs.last().expect("non-empty");
            let (z, act) = lvc_forward_with_activations(h, ks, &self.interval_map(l))?;
            let mut next = h.clone();
            next.add_assign(&z);
            hs.push(next);
            acts.push(act);
        }
        let o = step.out_proj.forward(hs.last().expect("non-empty"));
        let nb = o.dim(0) / 2;
        Ok((o.rows(0, nb), o.rows(nb, 2 * nb), hs, acts))
    }

    fn mix(w: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
        let (c, len) = (w.dim(0), x.dim(1));
        let mut y = Tensor::zeros(x.shape());
        gemm(
            T::one(),
            MatRef::new(w.data(), c, c, c),
            MatRef::new(x.data(), c, len, len),
            T::zero(),
            y.data_mut(),
            len,
        );
        y
    }

    fn mixing_lu(&self, k: usize) -> Lu<f64> {
        Lu::new(&self.steps[k].inv_conv.cast::<f64>())
    }

    /// `T · ln|det W|` contributions are accumulated in double precision.
    fn forward_traced(
        &self,
        x: Tensor<T>,
        kernels: &StepKernels<T>,
        keep_trace: bool,
    ) -> Result<(LatentVector<T>, f64, Vec<StepTrace<T>>)> {
        if kernels.len() != self.steps.len() {
            return Err(Error::shape("one kernel list per flow step expected"));
        }
        let steps_t = x.dim(1);
        let mut cur = x;
        let mut segments = Vec::new();
        let mut log_det = 0.0;
        let mut traces = Vec::new();
        for (k, step) in self.steps.iter().enumerate() {
            if k > 0 && k % self.config.n_early_every == 0 {
                let e = self.config.n_early_size;
                segments.push(cur.rows(0, e));
                cur = cur.rows(e, cur.dim(0));
            }
            let c = step.channels();
            if cur.dim(0) != c {
                return Err(Error::shape(format!(
                    "flow step {k} expects {c} channels, got {}",
                    cur.dim(0)
                )));
            }
            log_det += steps_t as f64 * self.mixing_lu(k).log_abs_det();
            let y = Self::mix(&step.inv_conv, &cur);
            let na = step.cond_channels();
            let x_a = y.rows(0, na);
            let (s_raw, b, hs, acts) = self.coupling(k, &x_a, &kernels[k])?;
            let mut xb = y.rows(na, c);
            let lim = T::of(LOG_SCALE_CLAMP);
            for ((v, &s), &bb) in xb.data_mut().iter_mut().zip(s_raw.data()).zip(b.data()) {
                let s = s.max(-lim).min(lim);
                log_det += s.to_f64_lossy();
                *v = *v * s.exp() + bb;
            }
            let out = Tensor::vstack(&[&x_a, &xb]);
            if !out.all_finite() || !log_det.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite values at flow step {k}"
                )));
            }
            if keep_trace {
                traces.push(StepTrace {
                    x_in: cur,
                    y,
                    hs,
                    acts,
                    s_raw,
                });
            }
            cur = out;
        }
        segments.push(cur);
        Ok((LatentVector { segments }, log_det, traces))
    }

    /// Forward pass on an already squeezed signal with precomputed kernels.
    pub fn forward_squeezed(
        &self,
        x: &Tensor<T>,
        kernels: &StepKernels<T>,
    ) -> Result<(LatentVector<T>, f64)> {
        let (z, ld, _) = self.forward_traced(x.clone(), kernels, false)?;
        Ok((z, ld))
    }

    /// Map a waveform to its latent representation and likelihood, with the
    /// predictor in eval mode. `mel` is `(num_mels, frames)` and must have
    /// exactly one more frame than the waveform has hops.
    pub fn flow_forward(&self, samples: &[T], mel: &Tensor<T>) -> Result<FlowOutput<T>> {
        let x = self.squeeze_waveform(samples)?;
        self.check_alignment(x.steps(), mel)?;
        let (mut kernels, _) = self.predict_kernels(std::slice::from_ref(mel), Mode::Eval)?;
        let (latent, log_det_total) = self.forward_squeezed(&x.data, &kernels.remove(0))?;
        let nll = nll_per_element(
            latent.sum_sq(),
            latent.num_elements(),
            log_det_total,
            self.config.sigma_train,
        );
        Ok(FlowOutput {
            latent,
            log_det_total,
            nll,
        })
    }

    /// Inverse pass on squeezed data with precomputed kernels.
    pub fn inverse_squeezed(
        &self,
        z: &LatentVector<T>,
        kernels: &StepKernels<T>,
    ) -> Result<Tensor<T>> {
        let early = self.config.early_output_steps();
        if z.segments.len() != early.len() + 1 {
            return Err(Error::shape(format!(
                "latent has {} segments, expected {}",
                z.segments.len(),
                early.len() + 1
            )));
        }
        if kernels.len() != self.steps.len() {
            return Err(Error::shape("one kernel list per flow step expected"));
        }
        let mut pending: Vec<&Tensor<T>> = z.segments[..early.len()].iter().collect();
        let mut cur = z.segments[early.len()].clone();
        for (k, step) in self.steps.iter().enumerate().rev() {
            let c = step.channels();
            if cur.dim(0) != c {
                return Err(Error::shape(format!(
                    "flow step {k} expects {c} channels, got {}",
                    cur.dim(0)
                )));
            }
            let na = step.cond_channels();
            let x_a = cur.rows(0, na);
            let (s_raw, b, _, _) = self.coupling(k, &x_a, &kernels[k])?;
            let mut xb = cur.rows(na, c);
            let lim = T::of(LOG_SCALE_CLAMP);
            for ((v, &s), &bb) in xb.data_mut().iter_mut().zip(s_raw.data()).zip(b.data()) {
                let s = s.max(-lim).min(lim);
                *v = (*v - bb) * (-s).exp();
            }
            let y = Tensor::vstack(&[&x_a, &xb]);
            let lu = self.mixing_lu(k);
            if lu.is_singular() {
                return Err(Error::Inversion(format!(
                    "mixing matrix of flow step {k} is singular"
                )));
            }
            let w_inv: Tensor<T> = lu.inverse()?.cast();
            cur = Self::mix(&w_inv, &y);
            if k > 0 && k % self.config.n_early_every == 0 {
                let seg = pending.pop().expect("segment count checked");
                if seg.dim(1) != cur.dim(1) {
                    return Err(Error::shape("latent segments differ in length"));
                }
                cur = Tensor::vstack(&[seg, &cur]);
            }
            if !cur.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite values inverting flow step {k}"
                )));
            }
        }
        Ok(cur)
    }

    /// Reconstruct the waveform from latents, conditioned on `mel`.
    pub fn flow_inverse(&self, z: &LatentVector<T>, mel: &Tensor<T>) -> Result<Vec<T>> {
        let steps = z.segments.last().map_or(0, |s| s.dim(1));
        self.check_alignment(steps, mel)?;
        let (mut kernels, _) = self.predict_kernels(std::slice::from_ref(mel), Mode::Eval)?;
        let x = self.inverse_squeezed(z, &kernels.remove(0))?;
        let original_length = x.len();
        Ok(unsqueeze(&SqueezedSignal {
            data: x,
            original_length,
        }))
    }

    /// Latent layout for a mel with `frames` frames, filled with `value`.
    pub fn latent_like(&self, frames: usize, mut value: impl FnMut() -> T) -> LatentVector<T> {
        let t = frames.saturating_sub(1) * self.config.frame_hop_elems();
        let early = self.config.early_output_steps();
        let mut segments: Vec<Tensor<T>> = early
            .iter()
            .map(|_| Tensor::from_fn(&[self.config.n_early_size, t], |_| value()))
            .collect();
        let last = *self.config.channel_schedule().last().expect("n_flows ≥ 1");
        segments.push(Tensor::from_fn(&[last, t], |_| value()));
        LatentVector { segments }
    }

    /// Draw `z ~ N(0, σ²)` and invert. `sigma == 0` is deterministic.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        mel: &Tensor<T>,
        sigma: f64,
        rng: &mut R,
    ) -> Result<Vec<T>> {
        let z = self.latent_like(mel.dim(1), || {
            let n: f64 = rng.sample(StandardNormal);
            T::of(sigma * n)
        });
        self.flow_inverse(&z, mel)
    }

    /// Backward through one item. Returns the flow-side parameter gradients
    /// (accumulated into `grad`, predictor slots untouched) and the kernel
    /// gradients `[step][layer]`. `weight` scales the item's loss.
    fn item_backward(
        &self,
        latent: &LatentVector<T>,
        traces: &[StepTrace<T>],
        kernels: &StepKernels<T>,
        weight: f64,
        grad: &mut MelGlow<T>,
    ) -> Result<StepKernels<T>> {
        let n = latent.num_elements() as f64;
        let var = self.config.sigma_train * self.config.sigma_train;
        let z_scale = T::of(weight / (var * n));
        let ld_grad = T::of(-weight / n);
        let lim = T::of(LOG_SCALE_CLAMP);
        let mut segs = latent.segments.iter().rev();
        let mut g = segs.next().expect("final segment").clone();
        g.scale(z_scale);
        let mut kernel_grads: StepKernels<T> = vec![Vec::new(); self.steps.len()];
        for (k, (step, tr)) in self.steps.iter().zip(traces).enumerate().rev() {
            let gstep = &mut grad.steps[k];
            let c = step.channels();
            let na = step.cond_channels();
            let t_len = tr.y.dim(1);
            let mut g_xa = g.rows(0, na);
            let g_out_b = g.rows(na, c);
            let xb = tr.y.rows(na, c);
            let nb = c - na;
            let mut g_o = Tensor::zeros(&[2 * nb, t_len]);
            {
                let (gs, gb) = g_o.data_mut().split_at_mut(nb * t_len);
                let mut g_xb = g_out_b.clone();
                for i in 0..nb * t_len {
                    let s_raw = tr.s_raw.data()[i];
                    let s = s_raw.max(-lim).min(lim);
                    let e = s.exp();
                    let go = g_out_b.data()[i];
                    g_xb.data_mut()[i] = go * e;
                    gb[i] = go;
                    gs[i] = if s_raw.abs() > lim {
                        T::zero()
                    } else {
                        go * xb.data()[i] * e + ld_grad
                    };
                }
                let mut g_h = step.out_proj.backward(
                    tr.hs.last().expect("non-empty"),
                    &g_o,
                    &mut gstep.out_proj,
                );
                let mut kg = Vec::with_capacity(tr.acts.len());
                for l in (0..tr.acts.len()).rev() {
                    let (gx, gk) = lvc_backward_with_activations(
                        &tr.hs[l],
                        &kernels[k][l],
                        &self.interval_map(l),
                        &tr.acts[l],
                        &g_h,
                    )?;
                    g_h.add_assign(&gx);
                    kg.push(gk);
                }
                kg.reverse();
                kernel_grads[k] = kg;
                let g_xa_in = step
                    .in_proj
                    .backward(&tr.y.rows(0, na), &g_h, &mut gstep.in_proj);
                g_xa.add_assign(&g_xa_in);
                let g_y = Tensor::vstack(&[&g_xa, &g_xb]);

                // W: ∂/∂W of ⟨g_y, W x⟩ plus the log-det term T·ln|det W|
                let w_inv = self.mixing_lu(k).inverse()?;
                let ld_w = -weight / n * t_len as f64;
                let gw = gstep.inv_conv.data_mut();
                for o in 0..c {
                    for i in 0..c {
                        let mut acc = T::zero();
                        for (&a, &b) in g_y.row(o).iter().zip(tr.x_in.row(i)) {
                            acc += a * b;
                        }
                        gw[o * c + i] += acc + T::of(ld_w * w_inv.data()[i * c + o]);
                    }
                }
                let wt = crate::linalg::transpose(&step.inv_conv);
                g = Self::mix(&wt, &g_y);
            }
            if k > 0 && k % self.config.n_early_every == 0 {
                let mut early = segs.next().expect("early segment").clone();
                early.scale(z_scale);
                g = Tensor::vstack(&[&early, &g]);
            }
        }
        Ok(kernel_grads)
    }

    /// Mean per-element NLL over a batch and its gradient with respect to
    /// every trainable parameter. The predictors run in train mode (batch
    /// statistics); the returned caches let the caller commit them.
    pub fn loss_and_grad(&self, waves: &[Vec<T>], mels: &[Tensor<T>]) -> Result<BatchGradient<T>> {
        if waves.is_empty() || waves.len() != mels.len() {
            return Err(Error::shape(format!(
                "{} waveforms vs {} mels",
                waves.len(),
                mels.len()
            )));
        }
        let xs = waves
            .iter()
            .zip(mels)
            .map(|(w, m)| {
                let x = self.squeeze_waveform(w)?;
                self.check_alignment(x.steps(), m)?;
                Ok(x.data)
            })
            .collect::<Result<Vec<_>>>()?;
        let (kernels, caches) = self.predict_kernels(mels, Mode::Train)?;
        let weight = 1.0 / waves.len() as f64;
        let items: Vec<Result<ItemGrad<T>>> = xs
            .into_par_iter()
            .zip(kernels.par_iter())
            .map(|(x, ks)| {
                let (latent, log_det, traces) = self.forward_traced(x, ks, true)?;
                let nll = nll_per_element(
                    latent.sum_sq(),
                    latent.num_elements(),
                    log_det,
                    self.config.sigma_train,
                );
                let mut g = self.zeros_like();
                let kg = self.item_backward(&latent, &traces, ks, weight, &mut g)?;
                Ok((nll, g, kg))
            })
            .collect();
        let mut grad = self.zeros_like();
        let mut item_nll = Vec::with_capacity(items.len());
        let mut kernel_grads: Vec<Vec<Vec<KernelSet<T>>>> = vec![Vec::new(); self.steps.len()];
        for item in items {
            let (nll, g, kg) = item?;
            item_nll.push(nll);
            for (dst, src) in grad.steps.iter_mut().zip(&g.steps) {
                dst.inv_conv.add_assign(&src.inv_conv);
                for (a, b) in [
                    (&mut dst.in_proj.weight, &src.in_proj.weight),
                    (&mut dst.in_proj.bias, &src.in_proj.bias),
                    (&mut dst.out_proj.weight, &src.out_proj.weight),
                    (&mut dst.out_proj.bias, &src.out_proj.bias),
                ] {
                    a.add_assign(b);
                }
            }
            for (dst, src) in kernel_grads.iter_mut().zip(kg) {
                dst.push(src);
            }
        }
        for ((step, cache), (dst, kg)) in self
            .steps
            .iter()
            .zip(&caches)
            .zip(grad.steps.iter_mut().zip(&kernel_grads))
        {
            let (gp, _) = step.predictor.backward(cache, kg)?;
            dst.predictor = gp;
        }
        let loss = item_nll.iter().sum::<f64>() * weight;
        Ok(BatchGradient {
            loss,
            item_nll,
            grad,
            predictor_caches: caches,
        })
    }

    /// Mean per-element NLL of a batch without gradients.
    pub fn batch_nll(&self, waves: &[Vec<T>], mels: &[Tensor<T>], mode: Mode) -> Result<f64> {
        if waves.is_empty() || waves.len() != mels.len() {
            return Err(Error::shape(format!(
                "{} waveforms vs {} mels",
                waves.len(),
                mels.len()
            )));
        }
        let (kernels, _) = self.predict_kernels(mels, mode)?;
        let nlls = waves
            .par_iter()
            .zip(mels.par_iter())
            .zip(kernels.par_iter())
            .map(|((w, m), ks)| {
                let x = self.squeeze_waveform(w)?;
                self.check_alignment(x.steps(), m)?;
                let (z, ld) = self.forward_squeezed(&x.data, ks)?;
                Ok(nll_per_element(
                    z.sum_sq(),
                    z.num_elements(),
                    ld,
                    self.config.sigma_train,
                ))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(nlls.iter().sum::<f64>() / nlls.len() as f64)
    }

    /// Fold train-mode batch statistics into every predictor's running
    /// statistics.
    pub fn commit_running_stats(&mut self, caches: &[PredictorCache<T>]) {
        for (step, cache) in self.steps.iter_mut().zip(caches) {
            step.predictor.commit_running_stats(cache);
        }
    }

    /// Smallest `|det W|` over all flow steps.
    pub fn min_abs_mixing_det(&self) -> f64 {
        (0..self.steps.len())
            .map(|k| self.mixing_lu(k).det().abs())
            .fold(f64::INFINITY, f64::min)
    }
}

impl<T: Real> ParamSet<T> for MelGlow<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (k, s) in self.steps.iter().enumerate() {
            let p = join(prefix, &format!("flows.{k}"));
            f(join(&p, "inv_conv"), &s.inv_conv);
            s.predictor.visit_params(&join(&p, "kp"), f);
            f(join(&p, "in_proj.weight"), &s.in_proj.weight);
            f(join(&p, "in_proj.bias"), &s.in_proj.bias);
            f(join(&p, "out_proj.weight"), &s.out_proj.weight);
            f(join(&p, "out_proj.bias"), &s.out_proj.bias);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (k, s) in self.steps.iter_mut().enumerate() {
            let p = join(prefix, &format!("flows.{k}"));
            f(join(&p, "inv_conv"), &mut s.inv_conv);
            s.predictor.visit_params_mut(&join(&p, "kp"), f);
            f(join(&p, "in_proj.weight"), &mut s.in_proj.weight);
            f(join(&p, "in_proj.bias"), &mut s.in_proj.bias);
            f(join(&p, "out_proj.weight"), &mut s.out_proj.weight);
            f(join(&p, "out_proj.bias"), &mut s.out_proj.bias);
        }
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (k, s) in self.steps.iter().enumerate() {
            s.predictor
                .visit_buffers(&join(prefix, &format!("flows.{k}.kp")), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (k, s) in self.steps.iter_mut().enumerate() {
            s.predictor
                .visit_buffers_mut(&join(prefix, &format!("flows.{k}.kp")), f);
        }
    }
}
