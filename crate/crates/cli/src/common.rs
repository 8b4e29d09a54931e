use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use melglow::config::ConfigFile;

use crate::error::{CliError, CliResult};

pub const SEED_VAR: &str = "MELGLOW_SEED";

/// Seed from `MELGLOW_SEED`, if set.
pub fn env_seed() -> CliResult<Option<u64>> {
    match env::var(SEED_VAR) {
        Ok(v) => {
            v.trim().parse().map(Some).map_err(|_| {
                CliError::usage(format!("{SEED_VAR}={v:?} is not an unsigned integer"))
            })
        }
        Err(env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::usage(format!("{SEED_VAR}: {e}"))),
    }
}

/// Resolve a preset name or TOML path, applying the seed override.
pub fn load_config(name_or_path: &str) -> CliResult<ConfigFile> {
    let mut cfg = ConfigFile::resolve(name_or_path).map_err(|e| match e {
        melglow::Error::Io(io) => CliError::io(format!("{name_or_path}: {io}")),
        other => CliError::usage(other.to_string()),
    })?;
    if let Some(seed) = env_seed()? {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

/// `*.wav` files directly inside `dir`, sorted by name.
pub fn wav_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let is_wav = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if is_wav && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}
