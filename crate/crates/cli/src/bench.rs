use std::time::Instant;

use melglow::flow::accounting::{
    count_parameters, count_waveglow_parameters, waveglow_preset_names, ParamReport, WaveGlowConfig,
};
use melglow::flow::{FlowConfig, MelGlow};
use melglow::frontend::{compute_mel, Waveform};
use melglow::predictor::mel_tensor;
use melglow::train::{crop_length, make_synthetic_dataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::common::load_config;
use crate::error::{CliError, CliResult};

const DEFAULT_CONFIGS: &[&str] = &[
    "melglow-32",
    "melglow-48",
    "melglow-64",
    "melglow-128",
    "melglow-kp-32c",
    "melglow-kp-64c",
    "melglow-kp-128c",
    "melglow-kp-1l",
    "melglow-kp-3l",
    "melglow-kp-5l",
    "waveglow-64",
    "waveglow-128",
    "waveglow-256",
    "waveglow-512",
];

#[derive(clap::Args)]
pub struct Args {
    /// Comma-separated preset names or TOML files (WaveGlow-style baselines
    /// are named `waveglow-<channels>`).
    #[arg(long, value_delimiter = ',')]
    config_list: Vec<String>,
    /// Also time synthesis of a fixed one-second mel.
    #[arg(long)]
    runtime: bool,
    /// Worker threads for --runtime.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

enum Model {
    Flow(FlowConfig),
    /// Counted only; the baseline has no executable network.
    WaveGlow,
}

fn print_report(r: &ParamReport) {
    println!(
        "{:<20} total {:>12} ({:.2} M)",
        r.name,
        r.total,
        r.millions()
    );
    for m in &r.modules {
        println!("  {:<22} {:>12}", m.module, m.params);
    }
}

/// Samples per second synthesizing from the mel of a one-second synthetic clip.
fn throughput(cfg: &FlowConfig, threads: usize) -> CliResult<(usize, f64)> {
    let clip = make_synthetic_dataset(1, 0).remove(0).wave;
    let len = crop_length(1.0, &cfg.stft);
    if clip.len() < len {
        return Err(CliError::usage(
            "configuration hop is too long for a one-second clip",
        ));
    }
    let wave = Waveform::new(clip.samples[..len].to_vec(), cfg.stft.sample_rate);
    let mel = mel_tensor::<f32>(&compute_mel(&wave, &cfg.stft)?);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = MelGlow::<f32>::new(cfg, &mut rng)?;
    model.randomize_output_layers(0.1, &mut rng);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let samples = pool.install(|| model.sample(&mel, cfg.sigma_sample, &mut rng))?;
    Ok((samples.len(), start.elapsed().as_secs_f64()))
}

pub fn run(args: Args) -> CliResult {
    if args.threads == 0 {
        return Err(CliError::usage("--threads must be at least 1"));
    }
    let names: Vec<String> = if args.config_list.is_empty() {
        DEFAULT_CONFIGS.iter().map(|s| s.to_string()).collect()
    } else {
        args.config_list.clone()
    };
    for name in &names {
        let (report, model) = if waveglow_preset_names().contains(&name.as_str()) {
            let cfg = WaveGlowConfig::preset(name).expect("listed baseline");
            (count_waveglow_parameters(name, &cfg), Model::WaveGlow)
        } else {
            let cfg = load_config(name)?.flow;
            (count_parameters(name, &cfg), Model::Flow(cfg))
        };
        print_report(&report);
        if args.runtime {
            match model {
                Model::Flow(cfg) => {
                    let (n, secs) = throughput(&cfg, args.threads)?;
                    println!(
                        "  runtime: {n} samples in {secs:.3} s = {:.0} samples/s ({} thread{})",
                        n as f64 / secs,
                        args.threads,
                        if args.threads == 1 { "" } else { "s" }
                    );
                }
                Model::WaveGlow => println!("  runtime: n/a (parameter model only)"),
            }
        }
    }
    Ok(())
}
