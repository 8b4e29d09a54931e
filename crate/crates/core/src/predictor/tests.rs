use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::relative_error;

fn tiny_targets() -> Vec<KernelTarget> {
    vec![KernelTarget {
        layer_id: 0,
        out_ch: 2,
        in_ch: 2,
        kernel_size: 3,
    }]
}

fn tiny_config() -> KernelPredictorConfig {
    KernelPredictorConfig {
        hidden_ch: 4,
        residual_blocks: 1,
        kp_kernel_size: 3,
    }
}

fn random_mel(rng: &mut ChaCha8Rng, mels: usize, frames: usize) -> Tensor<f64> {
    Tensor::from_fn(&[mels, frames], |_| rng.random_range(-2.0..1.0))
}

/// Predictor with every parameter (including the zero-initialised output
/// layer and BN affine terms) randomised.
fn randomized(
    rng: &mut ChaCha8Rng,
    cfg: &KernelPredictorConfig,
    mels: usize,
    targets: Vec<KernelTarget>,
) -> KernelPredictor<f64> {
    let mut kp = KernelPredictor::new(cfg, mels, targets, rng).unwrap();
    kp.visit_params_mut("", &mut |name, t| {
        let scale = if name.ends_with("gamma") { 0.3 } else { 0.5 };
        let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = base + rng.random_range(-scale..scale));
    });
    kp
}

fn probe_loss(kernels: &[Vec<KernelSet<f64>>], probes: &[Vec<KernelSet<f64>>]) -> f64 {
    let mut s = 0.0;
    for (ks, ps) in kernels.iter().zip(probes) {
        for (k, p) in ks.iter().zip(ps) {
            for (a, b) in k.tensors().iter().zip(p.tensors()) {
                s += a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| x * y)
                    .sum::<f64>();
            }
        }
    }
    s
}

fn random_probes(
    rng: &mut ChaCha8Rng,
    kernels: &[Vec<KernelSet<f64>>],
) -> Vec<Vec<KernelSet<f64>>> {
    kernels
        .iter()
        .map(|ks| {
            ks.iter()
                .map(|k| {
                    let mut p = k.clone();
                    for t in p.tensors_mut() {
                        t.data_mut()
                            .iter_mut()
                            .for_each(|v| *v = rng.random_range(-1.0..1.0));
                    }
                    p
                })
                .collect()
        })
        .collect()
}

fn gradcheck(batch: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config();
    let kp = randomized(&mut rng, &cfg, 3, tiny_targets());
    let mels: Vec<_> = (0..batch).map(|_| random_mel(&mut rng, 3, 6)).collect();
    let (kernels, cache) = kp.predict(&mels, Mode::Train).unwrap();
    let probes = random_probes(&mut rng, &kernels);
    let (grad, gmel) = kp.backward(&cache, &probes).unwrap();

    let eps = 1e-5;
    let eval = |p: &KernelPredictor<f64>, m: &[Tensor<f64>]| {
        let (k, _) = p.predict(m, Mode::Train).unwrap();
        probe_loss(&k, &probes)
    };
    let mut worst: f64 = 0.0;
    let flat = kp.flat_params();
    let gflat = grad.flat_params();
    for i in 0..flat.len() {
        let mut p = kp.clone();
        let mut v = flat.clone();
        v[i] += eps;
        p.set_flat_params(&v);
        let up = eval(&p, &mels);
        v[i] -= 2.0 * eps;
        p.set_flat_params(&v);
        let down = eval(&p, &mels);
        worst = worst.max(relative_error(gflat[i], (up - down) / (2.0 * eps)));
    }
    for (b, g) in gmel.iter().enumerate() {
        for i in 0..g.len() {
            let mut m = mels.clone();
            m[b].data_mut()[i] += eps;
            let up = eval(&kp, &m);
            m[b].data_mut()[i] -= 2.0 * eps;
            let down = eval(&kp, &m);
            worst = worst.max(relative_error(g.data()[i], (up - down) / (2.0 * eps)));
        }
    }
    worst
}

#[test]
fn drops_one_frame() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let targets = vec![KernelTarget {
        layer_id: 0,
        out_ch: 4,
        in_ch: 4,
        kernel_size: 3,
    }];
    let cfg = KernelPredictorConfig {
        hidden_ch: 8,
        residual_blocks: 1,
        kp_kernel_size: 3,
    };
    let kp = KernelPredictor::<f64>::new(&cfg, 80, targets, &mut rng).unwrap();
    let mel = random_mel(&mut rng, 80, 88);
    let (k, _) = kp.predict(&[mel], Mode::Eval).unwrap();
    assert_eq!(k[0][0].num_frames(), 87);
    assert_eq!(87 * 256, 22_272);
    assert_eq!(22_272 / 8, 87 * 32);
}

#[test]
fn zero_output_layer_gives_zero_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let kp = KernelPredictor::<f64>::new(&tiny_config(), 3, tiny_targets(), &mut rng).unwrap();
    let mel = random_mel(&mut rng, 3, 10);
    let (k, _) = kp.predict(&[mel], Mode::Train).unwrap();
    for t in k[0][0].tensors() {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn constant_mel_gives_identical_interior_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let kp = randomized(&mut rng, &tiny_config(), 3, tiny_targets());
    let mel = Tensor::from_fn(&[3, 12], |i| [0.3, -1.0, 2.0][i / 12]);
    let (k, _) = kp.predict(&[mel], Mode::Eval).unwrap();
    let ks = &k[0][0];
    let w = ks.w_f.len() / ks.num_frames();
    let mid = &ks.w_f.data()[5 * w..6 * w];
    // receptive field of one block with K=3 reaches 2 frames each side
    for f in 2..ks.num_frames() - 2 {
        assert_eq!(&ks.w_f.data()[f * w..(f + 1) * w], mid);
    }
}

#[test]
fn eval_is_deterministic_and_non_mutating() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let kp = randomized(&mut rng, &tiny_config(), 3, tiny_targets());
    let mel = random_mel(&mut rng, 3, 9);
    let before = kp.clone();
    let (a, _) = kp.predict(std::slice::from_ref(&mel), Mode::Eval).unwrap();
    let (_, _) = kp.predict(std::slice::from_ref(&mel), Mode::Train).unwrap();
    let (b, _) = kp.predict(&[mel], Mode::Eval).unwrap();
    assert_eq!(a, b);
    assert_eq!(kp, before);
}

#[test]
fn residual_block_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut kp = randomized(&mut rng, &tiny_config(), 3, tiny_targets());
    let blk = &mut kp.blocks[0];
    blk.conv2.weight.fill(0.0);
    blk.conv2.bias.fill(0.0);
    blk.bn2.gamma.fill(1.0);
    blk.bn2.beta.fill(0.0);
    blk.bn2.running_mean.fill(0.0);
    blk.bn2.running_var.fill(1.0 - BN_EPS);
    let mel = random_mel(&mut rng, 3, 7);
    let cache = kp.features(&[mel], Mode::Eval).unwrap();
    assert_eq!(cache.features[0], cache.entry_out[0]);
}

#[test]
fn param_count_matches_walk() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let targets = vec![
        KernelTarget {
            layer_id: 0,
            out_ch: 16,
            in_ch: 16,
            kernel_size: 3,
        },
        KernelTarget {
            layer_id: 1,
            out_ch: 16,
            in_ch: 16,
            kernel_size: 1,
        },
    ];
    for (h, blocks, k) in [(4, 1, 3), (16, 2, 3), (8, 3, 5)] {
        let cfg = KernelPredictorConfig {
            hidden_ch: h,
            residual_blocks: blocks,
            kp_kernel_size: k,
        };
        let kp = KernelPredictor::<f32>::new(&cfg, 80, targets.clone(), &mut rng).unwrap();
        assert_eq!(
            kp.num_params(),
            KernelPredictor::<f32>::param_count(&cfg, 80, &targets)
        );
    }
    assert_eq!(
        total_coeff_count(&targets),
        2 * 16 * 16 * 3 + 32 + 2 * 16 * 16 + 32
    );
}

#[test]
fn running_stats_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut kp = randomized(&mut rng, &tiny_config(), 3, tiny_targets());
    let mels = vec![random_mel(&mut rng, 3, 6), random_mel(&mut rng, 3, 6)];
    let (_, cache) = kp.predict(&mels, Mode::Train).unwrap();
    let c1: Vec<Tensor<f64>> = cache.blocks[0]
        .input
        .iter()
        .map(|x| kp.blocks[0].conv1.forward(x, 1))
        .collect();
    let n = 10.0;
    let ch0: Vec<f64> = c1.iter().flat_map(|t| t.row(0).to_vec()).collect();
    let mean = ch0.iter().sum::<f64>() / n;
    let var = ch0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    kp.commit_running_stats(&cache);
    let bn = &kp.blocks[0].bn1;
    assert!((bn.running_mean.data()[0] - 0.1 * mean).abs() < 1e-12);
    assert!((bn.running_var.data()[0] - (0.9 + 0.1 * var)).abs() < 1e-12);
}

#[test]
fn zero_upstream_gives_zero_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let kp = randomized(&mut rng, &tiny_config(), 3, tiny_targets());
    let mels = vec![random_mel(&mut rng, 3, 6)];
    let (k, cache) = kp.predict(&mels, Mode::Train).unwrap();
    let zero: Vec<Vec<KernelSet<f64>>> = k
        .iter()
        .map(|ks| {
            ks.iter()
                .map(|s| KernelSet::zeros(s.num_frames(), 2, 2, 3))
                .collect()
        })
        .collect();
    let (g, gm) = kp.backward(&cache, &zero).unwrap();
    assert!(g.flat_params().iter().all(|&v| v == 0.0));
    assert!(gm[0].data().iter().all(|&v| v == 0.0));
}

#[test]
fn gradcheck_single_item() {
    let err = gradcheck(1, 10);
    assert!(err <= 1e-6, "max relative error {err}");
}

#[test]
fn gradcheck_through_batch_statistics() {
    let err = gradcheck(2, 11);
    assert!(err <= 1e-6, "max relative error {err}");
}

#[test]
fn errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let kp = KernelPredictor::<f64>::new(&tiny_config(), 3, tiny_targets(), &mut rng).unwrap();
    let short = random_mel(&mut rng, 3, 1);
    assert!(matches!(
        kp.predict(&[short], Mode::Eval),
        Err(Error::InputTooShort(_))
    ));
    let wrong = random_mel(&mut rng, 4, 5);
    assert!(matches!(
        kp.predict(&[wrong], Mode::Eval),
        Err(Error::Shape(_))
    ));
    let mel = random_mel(&mut rng, 3, 5);
    let (_, cache) = kp.predict(&[mel], Mode::Eval).unwrap();
    assert!(kp.backward(&cache, &[]).is_err());
    let bad = KernelPredictorConfig {
        kp_kernel_size: 4,
        ..tiny_config()
    };
    assert!(KernelPredictor::<f64>::new(&bad, 3, tiny_targets(), &mut rng).is_err());
}
