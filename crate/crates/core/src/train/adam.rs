//! Adam with bias correction over a flattened parameter vector.

use crate::params::ParamSet;
use crate::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moments in parameter visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Number of updates applied.
    pub step: u64,
    /// Updates skipped because the gradient was not finite.
    pub skipped: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            step: 0,
            skipped: 0,
        }
    }
}

/// Apply one Adam update. Returns `false` (and leaves the parameters and
/// moments untouched) when any gradient entry is not finite.
pub fn adam_step<T: Real, P: ParamSet<T>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<T>,
    lr: f64,
) -> bool {
    let g = grads.flat_params();
    assert_eq!(
        g.len(),
        state.m.len(),
        "gradient length differs from optimizer state"
    );
    if !g.iter().all(|v| v.is_finite()) {
        state.skipped += 1;
        return false;
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(BETA1), T::of(BETA2));
    let c1 = T::of(1.0 - BETA1.powi(t));
    let c2 = T::of(1.0 - BETA2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(EPSILON));
    let mut p = params.flat_params();
    for i in 0..p.len() {
        let gi = g[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * gi;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * gi * gi;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    params.set_flat_params(&p);
    true
}

/// Euclidean norm of a gradient.
pub fn grad_norm<T: Real, P: ParamSet<T>>(grads: &P) -> f64 {
    let mut s = 0.0;
    grads.visit_params("", &mut |_, t| {
        s += t
            .data()
            .iter()
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>();
    });
    s.sqrt()
}

/// Scale `grads` so that its norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm<T: Real, P: ParamSet<T>>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        let k = T::of(max_norm / norm);
        grads.visit_params_mut("", &mut |_, t| t.scale(k));
    }
    norm
}
