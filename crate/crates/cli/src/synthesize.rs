use std::path::PathBuf;

use melglow::checkpoint::Checkpoint;
use melglow::config::differing_fields;
use melglow::frontend::{
    compute_mel, read_mel_cache, read_wav, write_wav, MelSpectrogram, Waveform,
};
use melglow::predictor::mel_tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::common::{env_seed, load_config};
use crate::error::{CliError, CliResult};

#[derive(clap::Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["mel", "wav"]))]
pub struct Args {
    /// Trained checkpoint.
    #[arg(long, value_name = "CKPT")]
    ckpt: PathBuf,
    /// Mel cache written by `preprocess`.
    #[arg(long, value_name = "PATH")]
    mel: Option<PathBuf>,
    /// WAV file whose mel is computed first (copy-synthesis).
    #[arg(long, value_name = "PATH")]
    wav: Option<PathBuf>,
    /// Output WAV file.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Latent standard deviation (defaults to the model's `sigma_sample`).
    #[arg(long)]
    sigma: Option<f64>,
    /// Latent noise seed (defaults to MELGLOW_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Expected configuration; synthesis refuses a checkpoint that differs.
    #[arg(long)]
    config: Option<String>,
}

pub fn run(args: Args) -> CliResult {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let flow = &ckpt.config.flow;
    if let Some(name) = &args.config {
        let cfg = load_config(name)?;
        let diff = differing_fields(&cfg.flow, flow)?;
        if !diff.is_empty() {
            return Err(CliError::usage(format!(
                "checkpoint {} differs from configuration {name} in: {}",
                args.ckpt.display(),
                diff.join(", ")
            )));
        }
    }
    let stft = &flow.stft;
    let mel: MelSpectrogram = match (&args.mel, &args.wav) {
        (Some(path), _) => read_mel_cache(path, stft)?,
        (None, Some(path)) => {
            let wave = read_wav(path)?;
            if wave.sample_rate != stft.sample_rate {
                return Err(CliError::usage(format!(
                    "{} is {} Hz, the model expects {} Hz",
                    path.display(),
                    wave.sample_rate,
                    stft.sample_rate
                )));
            }
            compute_mel(&wave, stft)?
        }
        (None, None) => unreachable!("clap requires --mel or --wav"),
    };
    if mel.num_mels != stft.num_mels {
        return Err(CliError::usage(format!(
            "mel has {} channels, the model expects {}",
            mel.num_mels, stft.num_mels
        )));
    }
    if mel.num_frames < 2 {
        return Err(CliError::usage("mel needs at least two frames"));
    }
    let sigma = args.sigma.unwrap_or(flow.sigma_sample);
    if !(sigma >= 0.0) {
        return Err(CliError::usage(format!(
            "--sigma must be non-negative, got {sigma}"
        )));
    }
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let model = ckpt.to_model::<f32>()?;
    let samples = model.sample(
        &mel_tensor::<f32>(&mel),
        sigma,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )?;
    let wave = Waveform::new(
        samples.iter().map(|&v| f64::from(v)).collect(),
        stft.sample_rate,
    );
    write_wav(&args.out, &wave)?;
    println!(
        "wrote {} ({} samples, {:.3} s)",
        args.out.display(),
        wave.len(),
        wave.duration_secs()
    );
    Ok(())
}
