//! Property suites run by `melglow verify`: each compares an analytic result
//! against an independent oracle and reports the worst disagreement.
//!
//! A report prints one line per check:
//!
//! ```text
//! suite=inversion check=f64 cases=20 max_error=3.1e-15 tolerance=1e-10 status=pass
//! ```

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::flow::{preset_names, FlowConfig, LatentVector, MelGlow, StepKernels};
use crate::frontend::{compute_mel, squeeze, unsqueeze, Waveform};
use crate::gradcheck::check_model_gradients;
use crate::lvc::reference::lvc_reference;
use crate::lvc::{lvc_forward, IntervalMap, KernelSet};
use crate::predictor::Mode;
use crate::{Error, Result, Tensor};

pub const ORACLE_TOLERANCE: f64 = 1e-12;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
pub const INVERSION_TOLERANCE_F64: f64 = 1e-10;
pub const INVERSION_TOLERANCE_F32: f64 = 1e-4;
pub const LOGDET_TOLERANCE: f64 = 1e-5;
/// Largest input, in samples, whose Jacobian is formed explicitly.
pub const LOGDET_MAX_DIMS: usize = 64;

/// Output-layer scale of [`active_model`].
pub const ACTIVE_OUTPUT_SCALE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Inversion,
    Gradcheck,
    Oracle,
    Logdet,
    Structure,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Oracle,
        Suite::Gradcheck,
        Suite::Inversion,
        Suite::Logdet,
        Suite::Structure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Inversion => "inversion",
            Suite::Gradcheck => "gradcheck",
            Suite::Oracle => "oracle",
            Suite::Logdet => "logdet",
            Suite::Structure => "structure",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| Error::config(format!("unknown suite {s:?}")))
    }
}

/// One compared quantity inside a suite.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl Check {
    fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            cases: 0,
            max_error: 0.0,
            tolerance,
        }
    }

    fn record(&mut self, error: f64) {
        self.cases += 1;
        // NaN must never read as a pass
        if error.is_nan() || error > self.max_error {
            self.max_error = if error.is_nan() { f64::INFINITY } else { error };
        }
    }

    pub fn passed(&self) -> bool {
        self.cases > 0 && self.max_error <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Worst error over all checks.
    pub fn max_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.checks.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(
                f,
                "suite={} check={} cases={} max_error={:.3e} tolerance={:e} status={}",
                self.suite,
                c.name,
                c.cases,
                c.max_error,
                c.tolerance,
                if c.passed() { "pass" } else { "fail" }
            )?;
        }
        Ok(())
    }
}

/// Run one suite against `cfg`.
pub fn run_suite(suite: Suite, cfg: &FlowConfig, seed: u64) -> Result<SuiteReport> {
    cfg.validate()?;
    let checks = match suite {
        Suite::Oracle => vec![lvc_oracle(100, seed)?],
        Suite::Gradcheck => gradcheck(cfg, seed)?,
        Suite::Inversion => inversion(cfg, 20, seed)?.to_vec(),
        Suite::Logdet => vec![logdet(cfg, 5, seed)?],
        Suite::Structure => structure(cfg, seed)?,
    };
    Ok(SuiteReport { suite, checks })
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// `instances` random LVC problems (channels ≤ 4, length ≤ 256, frames ≤ 8,
/// K ∈ {1, 3, 5}, dilation ∈ {1, 2, 4}) against the per-interval
/// brute-force convolution.
pub fn lvc_oracle(instances: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = Check::new("lvc-vs-brute-force", ORACLE_TOLERANCE);
    for _ in 0..instances {
        let in_ch = rng.random_range(1..=4);
        let out_ch = rng.random_range(1..=4);
        let frames = rng.random_range(1..=8);
        let hop = rng.random_range(1..=256 / frames);
        let ks = [1, 3, 5][rng.random_range(0..3)];
        let d = [1, 2, 4][rng.random_range(0..3)];
        let x = rand_tensor(&[in_ch, frames * hop], &mut rng, 1.0);
        let k = KernelSet {
            w_f: rand_tensor(&[frames, out_ch, in_ch, ks], &mut rng, 0.8),
            w_g: rand_tensor(&[frames, out_ch, in_ch, ks], &mut rng, 0.8),
            b_f: rand_tensor(&[frames, out_ch], &mut rng, 0.3),
            b_g: rand_tensor(&[frames, out_ch], &mut rng, 0.3),
        };
        let map = IntervalMap::new(hop, 4 * hop, d);
        let z = lvc_forward(&x, &k, &map)?;
        check.record(z.max_abs_diff(&lvc_reference(&x, &k, &map)));
    }
    Ok(check)
}

/// A double-precision model whose couplings are all active and whose mixing
/// matrices are generic rather than orthogonal. The output-layer scale keeps
/// the latent of a 12-step model within O(10); at 0.5 the compounded coupling
/// scales push it past 1e12, where no floating-point inverse is accurate.
pub fn active_model(cfg: &FlowConfig, rng: &mut ChaCha8Rng) -> Result<MelGlow<f64>> {
    let mut m = MelGlow::<f64>::new(cfg, rng)?;
    m.randomize_output_layers(ACTIVE_OUTPUT_SCALE, rng);
    for s in &mut m.steps {
        s.inv_conv
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    Ok(m)
}

/// Waveform of `frames − 1` hops with a random mel of `frames` frames.
fn random_instance(
    cfg: &FlowConfig,
    rng: &mut ChaCha8Rng,
    frames: usize,
) -> (Vec<f64>, Tensor<f64>) {
    let wave = (0..(frames - 1) * cfg.stft.hop_length)
        .map(|_| rng.random_range(-0.8..0.8))
        .collect();
    let mel = Tensor::from_fn(&[cfg.stft.num_mels, frames], |_| {
        rng.random_range(-3.0..0.5)
    });
    (wave, mel)
}

/// Central-difference check of every parameter tensor, grouped by role.
pub fn gradcheck(cfg: &FlowConfig, seed: u64) -> Result<Vec<Check>> {
    const CLASSES: [&str; 5] = [
        "lvc-kernels-via-predictor",
        "predictor-convs",
        "batch-norm-affine",
        "mixing-matrix",
        "coupling-projection",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = active_model(cfg, &mut rng)?;
    let (w1, m1) = random_instance(cfg, &mut rng, 3);
    let (w2, m2) = random_instance(cfg, &mut rng, 3);
    let report = check_model_gradients(&model, &[w1, w2], &[m1, m2], &|_| true, 3, &mut rng)?;
    let mut checks: Vec<Check> = CLASSES
        .iter()
        .map(|c| Check::new(*c, GRADCHECK_TOLERANCE))
        .collect();
    for case in &report.cases {
        let class = if case.tensor.contains(".kp.out.") {
            0
        } else if case.tensor.contains(".bn") {
            2
        } else if case.tensor.contains(".kp.") {
            1
        } else if case.tensor.ends_with(".inv_conv") {
            3
        } else if case.tensor.contains("_proj.") {
            4
        } else {
            return Err(Error::config(format!(
                "unclassified parameter {}",
                case.tensor
            )));
        };
        checks[class].record(case.rel_error);
    }
    Ok(checks)
}

fn max_abs_error<T: crate::Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x - *y).abs().to_f64_lossy())
        .fold(0.0, f64::max)
}

/// Forward-then-inverse reconstruction error over `draws` random models and
/// inputs, in double and in single precision.
pub fn inversion(cfg: &FlowConfig, draws: usize, seed: u64) -> Result<[Check; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f64_check = Check::new("f64", INVERSION_TOLERANCE_F64);
    let mut f32_check = Check::new("f32", INVERSION_TOLERANCE_F32);
    for _ in 0..draws {
        let model = active_model(cfg, &mut rng)?;
        let frames = rng.random_range(3..=6);
        let (wave, mel) = random_instance(cfg, &mut rng, frames);
        let out = model.flow_forward(&wave, &mel)?;
        let back = model.flow_inverse(&out.latent, &mel)?;
        f64_check.record(max_abs_error(&wave, &back));

        let model = model.cast::<f32>();
        let wave: Vec<f32> = wave.iter().map(|&v| v as f32).collect();
        let mel = mel.cast::<f32>();
        let out = model.flow_forward(&wave, &mel)?;
        let back = model.flow_inverse(&out.latent, &mel)?;
        f32_check.record(max_abs_error(&wave, &back));
    }
    Ok([f64_check, f32_check])
}

fn flatten(z: &LatentVector<f64>) -> Vec<f64> {
    z.segments.iter().flat_map(|s| s.data().to_vec()).collect()
}

fn latent_of(m: &MelGlow<f64>, kernels: &StepKernels<f64>, x: &[f64]) -> Result<Vec<f64>> {
    let sq = m.squeeze_waveform(x)?;
    let (z, _) = m.forward_squeezed(&sq.data, kernels)?;
    Ok(flatten(&z))
}

/// Analytic log-determinant against `ln|det J|` of the end-to-end Jacobian
/// built column by column with central differences. Configurations whose hop
/// exceeds [`LOGDET_MAX_DIMS`] samples are replaced by the `micro` preset.
pub fn logdet(cfg: &FlowConfig, draws: usize, seed: u64) -> Result<Check> {
    let cfg = if cfg.stft.hop_length <= LOGDET_MAX_DIMS {
        cfg.clone()
    } else {
        FlowConfig::micro()
    };
    let hops = (LOGDET_MAX_DIMS / cfg.stft.hop_length).min(4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = Check::new(
        format!("jacobian-{}d", hops * cfg.stft.hop_length),
        LOGDET_TOLERANCE,
    );
    for _ in 0..draws {
        let model = active_model(&cfg, &mut rng)?;
        let (wave, mel) = random_instance(&cfg, &mut rng, hops + 1);
        let (mut kernels, _) = model.predict_kernels(std::slice::from_ref(&mel), Mode::Eval)?;
        let kernels = kernels.remove(0);
        let sq = model.squeeze_waveform(&wave)?;
        let (_, analytic) = model.forward_squeezed(&sq.data, &kernels)?;
        let n = wave.len();
        let eps = 1e-6;
        let mut jac = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut up = wave.clone();
            up[j] += eps;
            let mut down = wave.clone();
            down[j] -= eps;
            let zu = latent_of(&model, &kernels, &up)?;
            let zd = latent_of(&model, &kernels, &down)?;
            for i in 0..n {
                jac[(i, j)] = (zu[i] - zd[i]) / (2.0 * eps);
            }
        }
        let numeric = jac.determinant().abs().ln();
        check.record((numeric - analytic).abs() / analytic.abs().max(1e-12));
    }
    Ok(check)
}

/// Exact bookkeeping properties; errors are mismatch counts.
pub fn structure(cfg: &FlowConfig, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut dims = Check::new("dimension-conservation", 0.0);
    for name in preset_names() {
        let p = FlowConfig::preset(name).expect("listed preset");
        let emitted = p.early_output_steps().len() * p.n_early_size;
        let last = *p.channel_schedule().last().unwrap_or(&0);
        dims.record(((emitted + last) != p.squeeze_channels) as u8 as f64);
    }
    let mut small = vec![FlowConfig::micro(), FlowConfig::tiny()];
    if !small.contains(cfg) {
        small.push(cfg.clone());
    }
    for c in &small {
        let model = MelGlow::<f64>::new(c, &mut rng)?;
        let (wave, mel) = random_instance(c, &mut rng, 4);
        let out = model.flow_forward(&wave, &mel)?;
        dims.record((out.latent.num_elements() != wave.len()) as u8 as f64);
    }

    let mut channels = Check::new("channel-bookkeeping", 0.0);
    let default = FlowConfig::default();
    let expected = [8, 8, 8, 8, 6, 6, 6, 6, 4, 4, 4, 4];
    channels.record((default.channel_schedule() != expected) as u8 as f64);
    let model = MelGlow::<f64>::new(cfg, &mut rng)?;
    let (wave, mel) = random_instance(cfg, &mut rng, 4);
    let out = model.flow_forward(&wave, &mel)?;
    let schedule = cfg.channel_schedule();
    for (k, s) in model.steps.iter().enumerate() {
        channels.record((s.channels() != schedule[k]) as u8 as f64);
    }
    let emitted: Vec<usize> = out.latent.segments.iter().map(|s| s.dim(0)).collect();
    let mut expected_segments = vec![cfg.n_early_size; cfg.early_output_steps().len()];
    expected_segments.push(*schedule.last().unwrap_or(&0));
    channels.record((emitted != expected_segments) as u8 as f64);

    let mut frames = Check::new("frame-alignment", 0.0);
    frames.record((default.frame_hop_elems() != 32) as u8 as f64);
    for n_frames in 2..6 {
        let mel = Tensor::from_fn(&[cfg.stft.num_mels, n_frames], |_| {
            rng.random_range(-3.0..0.5)
        });
        let (kernels, _) = model.predict_kernels(std::slice::from_ref(&mel), Mode::Eval)?;
        for layer in kernels[0].iter().flatten() {
            frames.record((layer.num_frames() != n_frames - 1) as u8 as f64);
        }
        let samples = (n_frames - 1) * cfg.stft.hop_length;
        let w = Waveform::new(
            (0..samples).map(|_| rng.random_range(-0.5..0.5)).collect(),
            cfg.stft.sample_rate,
        );
        let mel = compute_mel(&w, &cfg.stft)?;
        frames.record((mel.num_frames != n_frames) as u8 as f64);
        let sq = model.squeeze_waveform(&w.samples)?;
        frames.record((sq.steps() != (n_frames - 1) * cfg.frame_hop_elems()) as u8 as f64);
    }

    let mut exact = Check::new("squeeze-exactness", 0.0);
    for channels in [1, 2, 4, 8, cfg.squeeze_channels] {
        let steps = rng.random_range(1..64);
        let x: Vec<f64> = (0..channels * steps)
            .map(|_| rng.random::<f64>() - 0.5)
            .collect();
        let back = unsqueeze(&squeeze(&x, channels)?);
        exact.record(
            x.iter()
                .zip(&back)
                .filter(|(a, b)| a.to_bits() != b.to_bits())
                .count() as f64,
        );
    }
    Ok(vec![dims, channels, frames, exact])
}
