use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use melglow::frontend::{compute_mel, read_wav, write_mel_cache, StftConfig};
use rayon::prelude::*;

use crate::common::{load_config, wav_files};
use crate::error::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(clap::Args)]
pub struct Args {
    /// Directory of WAV files.
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    /// Output directory for `.mel` caches and the manifest.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Preset name or TOML file supplying the feature settings.
    #[arg(long, default_value = "tiny")]
    config: String,
}

struct Entry {
    file: String,
    samples: usize,
    seconds: f64,
    frames: usize,
}

fn process(path: &Path, out: &Path, stft: &StftConfig) -> melglow::Result<Entry> {
    let wave = read_wav(path)?;
    if wave.sample_rate != stft.sample_rate {
        return Err(melglow::Error::Config(format!(
            "sample rate {} Hz, expected {} Hz",
            wave.sample_rate, stft.sample_rate
        )));
    }
    let mel = compute_mel(&wave, stft)?;
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let file = format!("{stem}.mel");
    write_mel_cache(out.join(&file), &mel)?;
    Ok(Entry {
        file,
        samples: wave.len(),
        seconds: wave.duration_secs(),
        frames: mel.num_frames,
    })
}

pub fn run(args: Args) -> CliResult {
    let cfg = load_config(&args.config)?;
    let files = wav_files(&args.input)?;
    fs::create_dir_all(&args.out)?;
    let results: Vec<(PathBuf, melglow::Result<Entry>)> = files
        .par_iter()
        .map(|p| (p.clone(), process(p, &args.out, &cfg.flow.stft)))
        .collect();

    let mut manifest = String::from("file\tsamples\tseconds\tframes\n");
    let mut written = 0;
    for (path, result) in results {
        match result {
            Ok(e) => {
                manifest.push_str(&format!(
                    "{}\t{}\t{:.6}\t{}\n",
                    e.file, e.samples, e.seconds, e.frames
                ));
                written += 1;
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if written == 0 {
        return Err(CliError::io(format!(
            "no usable WAV files in {}",
            args.input.display()
        )));
    }
    fs::File::create(args.out.join(MANIFEST_NAME))?.write_all(manifest.as_bytes())?;
    println!(
        "wrote {written} mel caches ({} skipped) to {}",
        files.len() - written,
        args.out.display()
    );
    Ok(())
}
