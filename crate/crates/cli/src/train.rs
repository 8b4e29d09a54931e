use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use melglow::checkpoint::{Checkpoint, SavedTrainState};
use melglow::config::{differing_fields, ConfigFile};
use melglow::flow::MelGlow;
use melglow::frontend::{read_wav, Waveform};
use melglow::train::{make_synthetic_dataset, StepMetrics, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::common::{load_config, wav_files};
use crate::error::{CliError, CliResult};

pub const METRICS_NAME: &str = "metrics.log";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
/// Number of held-out clips generated alongside a synthetic training set.
const SYNTHETIC_VALIDATION_CLIPS: usize = 2;

#[derive(clap::Args)]
pub struct Args {
    /// Preset name or TOML file.
    #[arg(long, default_value = "tiny")]
    config: String,
    /// Directory of training WAV files (defaults to `paths.data`).
    #[arg(long, value_name = "DIR", conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Train on N generated clips instead of a data directory.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    /// Output directory for checkpoints and metrics (defaults to `paths.out`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Continue from a checkpoint written by a previous run.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
    /// Override `train.max_steps`.
    #[arg(long)]
    max_steps: Option<u64>,
}

/// Training and validation waveforms.
fn load_data(args: &Args, cfg: &ConfigFile) -> CliResult<(Vec<Waveform>, Vec<Waveform>)> {
    if let Some(n) = args.synthetic {
        if n == 0 {
            return Err(CliError::usage("--synthetic needs at least one clip"));
        }
        let seed = cfg.train.seed;
        let clips = |n, seed| {
            make_synthetic_dataset(n, seed)
                .into_iter()
                .map(|c| c.wave)
                .collect()
        };
        return Ok((
            clips(n, seed),
            clips(SYNTHETIC_VALIDATION_CLIPS, seed.wrapping_add(1)),
        ));
    }
    let dir = args
        .data
        .as_ref()
        .or(cfg.paths.data.as_ref())
        .ok_or_else(|| CliError::usage("one of --data, --synthetic or paths.data is required"))?;
    let mut data = Vec::new();
    for path in wav_files(dir)? {
        match read_wav(&path) {
            Ok(w) if w.sample_rate == cfg.flow.stft.sample_rate => data.push(w),
            Ok(w) => log::warn!(
                "skipping {}: sample rate {} Hz, expected {} Hz",
                path.display(),
                w.sample_rate,
                cfg.flow.stft.sample_rate
            ),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if data.is_empty() {
        return Err(CliError::io(format!(
            "no usable WAV files in {}",
            dir.display()
        )));
    }
    // fixed crops of the training clips serve as the validation slice
    let validation = data.clone();
    Ok((data, validation))
}

fn build_trainer(
    args: &Args,
    cfg: &ConfigFile,
    data: Vec<Waveform>,
    validation: &[Waveform],
) -> CliResult<Trainer<f32>> {
    let Some(path) = &args.resume else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let model = MelGlow::<f32>::new(&cfg.flow, &mut rng)?;
        return Ok(Trainer::new(model, cfg.train.clone(), data, validation)?);
    };
    let ckpt = Checkpoint::load(path)?;
    let diff = differing_fields(&ckpt.config.flow, &cfg.flow)?;
    if !diff.is_empty() {
        return Err(CliError::usage(format!(
            "configuration differs from checkpoint {} in: {}",
            path.display(),
            diff.join(", ")
        )));
    }
    let saved = ckpt.train_state.clone().ok_or_else(|| {
        CliError::usage(format!(
            "{} has no optimizer state to resume from",
            path.display()
        ))
    })?;
    let model = ckpt.to_model::<f32>()?;
    Ok(Trainer::resume(
        model,
        saved.adam,
        saved.state,
        cfg.train.clone(),
        data,
        validation,
    )?)
}

fn save_checkpoint(trainer: &Trainer<f32>, path: &Path) -> CliResult {
    let saved = SavedTrainState {
        state: trainer.state.clone(),
        adam: trainer.adam.clone(),
    };
    Checkpoint::from_model(&trainer.model, Some(trainer.config.clone()), Some(saved)).save(path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn run(args: Args) -> CliResult {
    let mut cfg = load_config(&args.config)?;
    if let Some(n) = args.max_steps {
        cfg.train.max_steps = n;
    }
    let out = args
        .out
        .clone()
        .or(cfg.paths.out.clone())
        .ok_or_else(|| CliError::usage("--out or paths.out is required"))?;
    let (data, validation) = load_data(&args, &cfg)?;
    let mut trainer = build_trainer(&args, &cfg, data, &validation)?;

    fs::create_dir_all(&out)?;
    cfg.save(out.join("config.toml"))?;
    let metrics_path = out.join(METRICS_NAME);
    let metrics_file = if args.resume.is_some() {
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    };
    let mut metrics = BufWriter::new(metrics_file);

    let max_steps = cfg.train.max_steps;
    let (log_every, ckpt_every) = (cfg.train.log_every, cfg.train.checkpoint_every);
    let mut first: Option<StepMetrics> = None;
    let mut last: Option<StepMetrics> = None;
    let mut non_finite = 0u64;
    let mut io_error: Option<CliError> = None;
    trainer.run(|t, m| {
        first.get_or_insert(*m);
        if !m.nll.is_finite() {
            non_finite += 1;
        }
        last = Some(*m);
        if m.step == 1 || m.step % log_every == 0 || m.step == max_steps {
            log::info!("{m}");
            if let Err(e) = writeln!(metrics, "{m}").and_then(|_| metrics.flush()) {
                io_error.get_or_insert(e.into());
            }
        }
        if m.step % ckpt_every == 0 {
            if let Err(e) = save_checkpoint(t, &out.join(format!("step-{:08}.ckpt", m.step))) {
                io_error.get_or_insert(e);
            }
        }
        Ok(())
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    save_checkpoint(&trainer, &out.join(FINAL_CHECKPOINT))?;
    match (first, last) {
        (Some(a), Some(b)) => println!(
            "trained steps {}..={}: nll {:.6} -> {:.6} (lr {}, non_finite_steps={non_finite}, rejected_steps={})",
            a.step, b.step, a.nll, b.nll, b.lr, trainer.state.rejected_steps
        ),
        _ => println!("nothing to do: checkpoint already at step {max_steps}"),
    }
    Ok(())
}
