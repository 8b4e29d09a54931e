use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::accounting::*;
use super::*;
use crate::gradcheck::check_model_gradients;
use crate::params::ParamSet;
use crate::predictor::Mode;
use crate::{Error, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_wave(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-0.8..0.8)).collect()
}

fn random_mel(rng: &mut ChaCha8Rng, mels: usize, frames: usize) -> Tensor<f64> {
    Tensor::from_fn(&[mels, frames], |_| rng.random_range(-3.0..0.5))
}

/// Model with every coupling active and a generic (non-orthogonal) mixing
/// matrix.
fn active_model(cfg: &FlowConfig, seed: u64) -> MelGlow<f64> {
    let mut r = rng(seed);
    let mut m = MelGlow::<f64>::new(cfg, &mut r).unwrap();
    m.randomize_output_layers(0.5, &mut r);
    for s in &mut m.steps {
        s.inv_conv
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += r.random_range(-0.2..0.2));
    }
    m
}

/// Wave of `frames − 1` hops with a matching random mel.
fn instance(cfg: &FlowConfig, r: &mut ChaCha8Rng, frames: usize) -> (Vec<f64>, Tensor<f64>) {
    let wave = random_wave(r, (frames - 1) * cfg.stft.hop_length);
    let mel = random_mel(r, cfg.stft.num_mels, frames);
    (wave, mel)
}

fn flatten(z: &LatentVector<f64>) -> Vec<f64> {
    z.segments.iter().flat_map(|s| s.data().to_vec()).collect()
}

#[test]
fn channel_schedule_defaults() {
    let cfg = FlowConfig::melglow(32);
    let sched = cfg.channel_schedule();
    assert_eq!(sched, vec![8, 8, 8, 8, 6, 6, 6, 6, 4, 4, 4, 4]);
    assert_eq!(cfg.early_output_steps(), vec![4, 8]);
    assert_eq!(cfg.frame_hop_elems(), 32);
    assert_eq!(cfg.frame_window_elems(), 128);
    assert_eq!(FlowConfig::tiny().channel_schedule(), vec![8, 8, 6, 6]);
    assert_eq!(FlowConfig::micro().channel_schedule(), vec![4, 4, 3, 3]);
}

#[test]
fn config_validation() {
    let mut cfg = FlowConfig::tiny();
    cfg.lvc_kernel_sizes.pop();
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = FlowConfig::tiny();
    cfg.n_early_size = 7;
    assert!(cfg.validate().is_err());
    let mut cfg = FlowConfig::tiny();
    cfg.stft.hop_length = 100;
    assert!(cfg.validate().is_err());
    let mut cfg = FlowConfig::tiny();
    cfg.lvc_kernel_sizes[2] = 2;
    assert!(cfg.validate().is_err());
    for name in preset_names() {
        FlowConfig::preset(name).unwrap().validate().unwrap();
    }
    assert!(FlowConfig::preset("nope").is_none());
}

#[test]
fn latent_dimension_is_conserved() {
    for cfg in [FlowConfig::micro(), FlowConfig::tiny()] {
        let m = active_model(&cfg, 1);
        let mut r = rng(2);
        let (wave, mel) = instance(&cfg, &mut r, 4);
        let out = m.flow_forward(&wave, &mel).unwrap();
        assert_eq!(out.latent.num_elements(), wave.len());
        assert_eq!(
            out.latent.segments.len(),
            cfg.early_output_steps().len() + 1
        );
        let steps = wave.len() / cfg.squeeze_channels;
        for (seg, &c) in out.latent.segments.iter().zip(
            cfg.early_output_steps()
                .iter()
                .map(|_| &cfg.n_early_size)
                .chain(cfg.channel_schedule().last()),
        ) {
            assert_eq!(seg.shape(), &[c, steps]);
        }
    }
}

#[test]
fn zero_coupling_reduces_to_mixing() {
    let cfg = FlowConfig::micro();
    let mut r = rng(3);
    let mut m = MelGlow::<f64>::new(&cfg, &mut r).unwrap();
    for s in &mut m.steps {
        s.inv_conv
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += r.random_range(-0.3..0.3));
    }
    let (wave, mel) = instance(&cfg, &mut r, 6);
    let out = m.flow_forward(&wave, &mel).unwrap();
    let t = (wave.len() / cfg.squeeze_channels) as f64;
    let expected: f64 = m
        .steps
        .iter()
        .map(|s| t * crate::linalg::det(&s.inv_conv).abs().ln())
        .sum();
    assert!((out.log_det_total - expected).abs() <= 1e-9);
    assert!(expected.abs() > 1e-3);
}

#[test]
fn zero_projection_gives_zero_scale_and_shift() {
    let cfg = FlowConfig::micro();
    let mut r = rng(4);
    let mut m = MelGlow::<f64>::new(&cfg, &mut r).unwrap();
    // kernels are active, only the output projection is zero
    m.randomize_output_layers(1.0, &mut r);
    for s in &mut m.steps {
        s.out_proj.weight.fill(0.0);
        s.out_proj.bias.fill(0.0);
    }
    let (wave, mel) = instance(&cfg, &mut r, 5);
    let out = m.flow_forward(&wave, &mel).unwrap();
    // orthogonal mixing and s = 0 keep the squared norm
    let norm: f64 = wave.iter().map(|v| v * v).sum();
    assert!((out.latent.sum_sq() - norm).abs() < 1e-9);
    assert!(out.log_det_total.abs() < 1e-9);
}

#[test]
fn standard_normal_data_has_gaussian_entropy() {
    let cfg = FlowConfig::tiny();
    let mut r = rng(5);
    let m = MelGlow::<f64>::new(&cfg, &mut r).unwrap();
    let wave: Vec<f64> = (0..8 * 256).map(|_| r.sample(StandardNormal)).collect();
    let mel = random_mel(&mut r, 80, 9);
    let out = m.flow_forward(&wave, &mel).unwrap();
    let target = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    assert!((out.nll - target).abs() <= 0.1 * target, "nll {}", out.nll);
    assert!((out.bits_per_dim() * std::f64::consts::LN_2 - out.nll).abs() < 1e-12);
}

#[test]
fn inverse_round_trip_f64() {
    for seed in 0..5 {
        for cfg in [FlowConfig::micro(), FlowConfig::tiny()] {
            let m = active_model(&cfg, 10 + seed);
            let mut r = rng(20 + seed);
            let (wave, mel) = instance(&cfg, &mut r, 5);
            let out = m.flow_forward(&wave, &mel).unwrap();
            let back = m.flow_inverse(&out.latent, &mel).unwrap();
            let err = wave
                .iter()
                .zip(&back)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-10, "seed {seed}: {err}");
        }
    }
}

#[test]
fn inverse_round_trip_f32() {
    let cfg = FlowConfig::tiny();
    let m = active_model(&cfg, 30).cast::<f32>();
    let mut r = rng(31);
    let (wave, mel) = instance(&cfg, &mut r, 5);
    let wave: Vec<f32> = wave.iter().map(|&v| v as f32).collect();
    let mel = mel.cast::<f32>();
    let out = m.flow_forward(&wave, &mel).unwrap();
    let back = m.flow_inverse(&out.latent, &mel).unwrap();
    let err = wave
        .iter()
        .zip(&back)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn silence_from_zero_latent() {
    let cfg = FlowConfig::tiny();
    let m = MelGlow::<f64>::new(&cfg, &mut rng(6)).unwrap();
    let mel = random_mel(&mut rng(7), 80, 4);
    let z = m.latent_like(4, || 0.0);
    let wave = m.flow_inverse(&z, &mel).unwrap();
    assert_eq!(wave.len(), 3 * 256);
    assert!(wave.iter().all(|&v| v == 0.0));
}

#[test]
fn sampling_is_finite_and_bounded() {
    let cfg = FlowConfig::tiny();
    let m = active_model(&cfg, 8);
    let mel = random_mel(&mut rng(9), 80, 6);
    let wave = m.sample(&mel, 0.6, &mut rng(10)).unwrap();
    assert_eq!(wave.len(), 5 * 256);
    assert!(wave.iter().all(|v| v.is_finite()));
    let rms = (wave.iter().map(|v| v * v).sum::<f64>() / wave.len() as f64).sqrt();
    assert!(rms < 10.0, "rms {rms}");
    let a = m.sample(&mel, 0.0, &mut rng(1)).unwrap();
    let b = m.sample(&mel, 0.0, &mut rng(2)).unwrap();
    assert_eq!(a, b);
}

/// Forward map `x → z` with fixed kernels, flattened.
fn latent_of(m: &MelGlow<f64>, kernels: &StepKernels<f64>, x: &[f64]) -> Vec<f64> {
    let sq = m.squeeze_waveform(x).unwrap();
    let (z, _) = m.forward_squeezed(&sq.data, kernels).unwrap();
    flatten(&z)
}

#[test]
fn log_det_matches_numeric_jacobian() {
    let cfg = FlowConfig::micro();
    for seed in 0..3 {
        let m = active_model(&cfg, 40 + seed);
        let mut r = rng(50 + seed);
        let (wave, mel) = instance(&cfg, &mut r, 5);
        assert_eq!(wave.len(), 32);
        let (mut kernels, _) = m
            .predict_kernels(std::slice::from_ref(&mel), Mode::Eval)
            .unwrap();
        let kernels = kernels.remove(0);
        let sq = m.squeeze_waveform(&wave).unwrap();
        let (_, log_det) = m.forward_squeezed(&sq.data, &kernels).unwrap();
        let n = wave.len();
        let eps = 1e-6;
        let mut jac = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut up = wave.clone();
            up[j] += eps;
            let mut down = wave.clone();
            down[j] -= eps;
            let (zu, zd) = (latent_of(&m, &kernels, &up), latent_of(&m, &kernels, &down));
            for i in 0..n {
                jac[(i, j)] = (zu[i] - zd[i]) / (2.0 * eps);
            }
        }
        let numeric = jac.determinant().abs().ln();
        let rel = (numeric - log_det).abs() / log_det.abs().max(1e-12);
        assert!(
            rel <= 1e-5,
            "seed {seed}: analytic {log_det} numeric {numeric}"
        );
    }
}

#[test]
fn doubling_frames_doubles_lengths() {
    let cfg = FlowConfig::micro();
    let m = active_model(&cfg, 60);
    let mut r = rng(61);
    let (w1, m1) = instance(&cfg, &mut r, 5);
    let (w2, m2) = instance(&cfg, &mut r, 9);
    let a = m.flow_forward(&w1, &m1).unwrap();
    let b = m.flow_forward(&w2, &m2).unwrap();
    for (s1, s2) in a.latent.segments.iter().zip(&b.latent.segments) {
        assert_eq!(2 * s1.dim(1), s2.dim(1));
    }
}

#[test]
fn misalignment_is_a_shape_error() {
    let cfg = FlowConfig::micro();
    let m = active_model(&cfg, 62);
    let mut r = rng(63);
    let (wave, _) = instance(&cfg, &mut r, 5);
    let mel = random_mel(&mut r, 4, 6);
    assert!(matches!(m.flow_forward(&wave, &mel), Err(Error::Shape(_))));
    assert!(matches!(
        m.flow_forward(&wave[..30], &mel),
        Err(Error::Shape(_))
    ));
    let wrong_mels = random_mel(&mut r, 5, 5);
    assert!(matches!(
        m.flow_forward(&wave, &wrong_mels),
        Err(Error::Shape(_))
    ));
}

#[test]
fn non_finite_input_names_the_step() {
    let cfg = FlowConfig::micro();
    let m = active_model(&cfg, 64);
    let mut r = rng(65);
    let (mut wave, mel) = instance(&cfg, &mut r, 5);
    wave[3] = f64::NAN;
    match m.flow_forward(&wave, &mel) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("flow step 0"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn singular_mixing_fails_inversion() {
    let cfg = FlowConfig::micro();
    let mut m = active_model(&cfg, 66);
    let mut r = rng(67);
    let (wave, mel) = instance(&cfg, &mut r, 5);
    let out = m.flow_forward(&wave, &mel).unwrap();
    m.steps[1].inv_conv.fill(1.0);
    assert!(matches!(
        m.flow_inverse(&out.latent, &mel),
        Err(Error::Inversion(_))
    ));
}

#[test]
fn parameter_walk_matches_closed_form() {
    for cfg in [
        FlowConfig::micro(),
        FlowConfig::tiny(),
        FlowConfig::melglow(32),
    ] {
        let m = MelGlow::<f32>::new(&cfg, &mut rng(70)).unwrap();
        let report = count_parameters("x", &cfg);
        assert_eq!(m.num_params(), report.total);
        let mixing: usize = m.steps.iter().map(|s| s.inv_conv.len()).sum();
        assert_eq!(report.get("mixing"), Some(mixing));
    }
}

/// Layer-by-layer enumeration of the baseline: `(weight elements, biases,
/// weight-norm gains)` for every layer.
fn waveglow_layers(c: usize) -> Vec<(usize, usize, usize)> {
    let mut layers = vec![(80 * 80 * 1024, 80, 0)];
    let mut remaining = 8;
    for f in 0..12 {
        if f == 4 || f == 8 {
            remaining -= 2;
        }
        let half = remaining / 2;
        layers.push((remaining * remaining, 0, 0));
        layers.push((half * c, c, c));
        layers.push((640 * 2 * c * 8, 2 * c * 8, 2 * c * 8));
        for i in 0..8 {
            layers.push((2 * c * c * 3, 2 * c, 2 * c));
            let res = if i < 7 { 2 * c } else { c };
            layers.push((res * c, res, res));
        }
        layers.push((c * 2 * half, 2 * half, 0));
    }
    layers
}

#[test]
fn waveglow_baseline_counts() {
    for c in [64, 128, 256, 512] {
        let expected: usize = waveglow_layers(c).iter().map(|(w, b, g)| w + b + g).sum();
        let r = count_waveglow_parameters("w", &WaveGlowConfig::with_channels(c));
        assert_eq!(r.total, expected, "channels {c}");
    }
    let r = count_waveglow_parameters("w", &WaveGlowConfig::with_channels(256));
    assert_eq!(r.get("upsample"), Some(80 * 80 * 1024 + 80));
    assert_eq!(r.get("mixing"), Some(4 * 64 + 4 * 36 + 4 * 16));
}

#[test]
fn gradients_match_central_differences() {
    let cfg = FlowConfig::micro();
    let m = active_model(&cfg, 80);
    let mut r = rng(81);
    let (w1, m1) = instance(&cfg, &mut r, 5);
    let (w2, m2) = instance(&cfg, &mut r, 5);
    let report = check_model_gradients(&m, &[w1, w2], &[m1, m2], &|_| true, 4, &mut r).unwrap();
    let worst = report.worst().unwrap();
    assert!(report.max_error() <= 1e-6, "{worst:?}");
    assert_eq!(report.tensors().len(), m.named_params().len());
}

#[test]
fn running_stats_commit_changes_only_buffers() {
    let cfg = FlowConfig::micro();
    let mut m = active_model(&cfg, 90);
    let mut r = rng(91);
    let (w, mel) = instance(&cfg, &mut r, 5);
    let before = m.flat_params();
    let g = m.loss_and_grad(&[w], &[mel]).unwrap();
    m.commit_running_stats(&g.predictor_caches);
    assert_eq!(m.flat_params(), before);
    let mut means = Vec::new();
    m.visit_buffers("", &mut |name, t| {
        if name.ends_with("running_mean") {
            means.extend_from_slice(t.data());
        }
    });
    assert!(means.iter().any(|&v| v != 0.0));
}
