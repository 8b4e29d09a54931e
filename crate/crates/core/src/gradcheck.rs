//! Central-difference gradient checking.

/// Gradients smaller than this are compared in absolute terms: for a
/// parameter whose true gradient is exactly zero (e.g. a bias feeding a
/// batch-norm in train mode) the difference quotient is pure round-off.
pub const GRAD_FLOOR: f64 = 1e-3;

/// `|analytic − numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

use rand::seq::index::sample;
use rand::Rng;

use crate::flow::MelGlow;
use crate::params::ParamSet;
use crate::predictor::Mode;
use crate::{Result, Tensor};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// One probed coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckCase {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.cases.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradcheckCase> {
        self.cases
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn failures(&self, tolerance: f64) -> Vec<&GradcheckCase> {
        self.cases
            .iter()
            .filter(|c| !(c.rel_error <= tolerance))
            .collect()
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        !self.cases.is_empty() && self.failures(tolerance).is_empty()
    }

    /// Names of the tensors that were probed, in order.
    pub fn tensors(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for c in &self.cases {
            if out.last() != Some(&c.tensor.as_str()) {
                out.push(&c.tensor);
            }
        }
        out
    }
}

/// Compare `analytic` (a gradient with the same structure as `params`)
/// against central differences of `loss` on up to `coords_per_tensor`
/// random coordinates of every parameter tensor whose name passes `select`.
pub fn check_gradients<P, L, R>(
    params: &P,
    analytic: &P,
    loss: L,
    select: &dyn Fn(&str) -> bool,
    coords_per_tensor: usize,
    rng: &mut R,
) -> Result<GradcheckReport>
where
    P: ParamSet<f64> + Clone,
    L: Fn(&P) -> Result<f64>,
    R: Rng + ?Sized,
{
    let grads: Vec<(String, Tensor<f64>)> = analytic
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let mut report = GradcheckReport::default();
    let mut offset = 0;
    let flat = params.flat_params();
    let mut probe = params.clone();
    for (name, g) in &grads {
        let len = g.len();
        if select(name) && len > 0 {
            let picks = sample(rng, len, coords_per_tensor.min(len)).into_vec();
            for idx in picks {
                let mut v = flat.clone();
                v[offset + idx] += FD_STEP;
                probe.set_flat_params(&v);
                let up = loss(&probe)?;
                v[offset + idx] -= 2.0 * FD_STEP;
                probe.set_flat_params(&v);
                let down = loss(&probe)?;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let a = g.data()[idx];
                report.cases.push(GradcheckCase {
                    tensor: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: relative_error(a, numeric),
                });
            }
        }
        offset += len;
    }
    Ok(report)
}

/// Gradient check of the batch NLL of a flow model.
pub fn check_model_gradients<R: Rng + ?Sized>(
    model: &MelGlow<f64>,
    waves: &[Vec<f64>],
    mels: &[Tensor<f64>],
    select: &dyn Fn(&str) -> bool,
    coords_per_tensor: usize,
    rng: &mut R,
) -> Result<GradcheckReport> {
    let analytic = model.loss_and_grad(waves, mels)?.grad;
    check_gradients(
        model,
        &analytic,
        |m: &MelGlow<f64>| m.batch_nll(waves, mels, Mode::Train),
        select,
        coords_per_tensor,
        rng,
    )
}
