//! The TOML configuration document read by the command-line tools.
//!
//! ```toml
//! [flow]            # FlowConfig, including [flow.kp] and [flow.stft]
//! [train]           # TrainConfig (optional, defaults apply)
//! [paths]           # optional data/output directories
//! ```
//!
//! Unknown keys are rejected and every embedded configuration is validated on
//! load. Serialisation sorts keys, so `parse(to_toml(c)) == c` and equal
//! configurations produce identical text.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::canonical_toml;
use crate::flow::{preset_names, FlowConfig};
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub flow: FlowConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl ConfigFile {
    /// A built-in configuration by name (see [`preset_names`]). The desk-scale
    /// presets come with the short training schedule.
    pub fn preset(name: &str) -> Option<Self> {
        let flow = FlowConfig::preset(name)?;
        let train = match name {
            "tiny" | "micro" => TrainConfig::tiny(),
            _ => TrainConfig::default(),
        };
        Some(Self {
            flow,
            train,
            paths: PathsConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        self.train.validate()
    }

    /// Parse and validate a TOML document.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        canonical_toml(self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Resolve a preset name or, failing that, a path to a TOML file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if let Some(cfg) = Self::preset(name_or_path) {
            return Ok(cfg);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(Error::config(format!(
                "{name_or_path} is neither a preset ({}) nor an existing file",
                preset_names().join(", ")
            )));
        }
        Self::load(path)
    }
}

/// Dotted paths of the fields whose values differ between `a` and `b`.
pub fn differing_fields<S: Serialize>(a: &S, b: &S) -> Result<Vec<String>> {
    let to_value = |v: &S| toml::Value::try_from(v).map_err(|e| Error::config(e.to_string()));
    let mut out = Vec::new();
    diff_values("", &to_value(a)?, &to_value(b)?, &mut out);
    Ok(out)
}

fn diff_values(path: &str, a: &toml::Value, b: &toml::Value, out: &mut Vec<String>) {
    match (a, b) {
        (toml::Value::Table(ta), toml::Value::Table(tb)) => {
            let mut keys: Vec<&String> = ta.keys().chain(tb.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let sub = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match (ta.get(k), tb.get(k)) {
                    (Some(x), Some(y)) => diff_values(&sub, x, y, out),
                    _ => out.push(sub),
                }
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for name in preset_names() {
            let cfg = ConfigFile::preset(name).unwrap();
            let text = cfg.to_toml().unwrap();
            let back = ConfigFile::parse(&text).unwrap();
            assert_eq!(back, cfg, "{name}");
            assert_eq!(back.to_toml().unwrap(), text);
        }
    }

    #[test]
    fn paths_round_trip() {
        let mut cfg = ConfigFile::preset("tiny").unwrap();
        cfg.paths.data = Some("clips".into());
        let back = ConfigFile::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let mut text = ConfigFile::preset("tiny").unwrap().to_toml().unwrap();
        text = text.replacen("[flow]\n", "[flow]\nlvc_chanels = 3\n", 1);
        let err = ConfigFile::parse(&text).unwrap_err().to_string();
        assert!(err.contains("lvc_chanels"), "{err}");
    }

    #[test]
    fn nested_unknown_key_is_named() {
        let mut text = ConfigFile::preset("tiny").unwrap().to_toml().unwrap();
        text = text.replacen("[flow.kp]\n", "[flow.kp]\nwidth = 3\n", 1);
        let err = ConfigFile::parse(&text).unwrap_err().to_string();
        assert!(err.contains("width"), "{err}");
    }

    #[test]
    fn embedded_invariants_are_checked() {
        let mut cfg = ConfigFile::preset("tiny").unwrap();
        cfg.flow.n_early_size = 7;
        assert!(ConfigFile::parse(&cfg.to_toml().unwrap()).is_err());
        let mut cfg = ConfigFile::preset("tiny").unwrap();
        cfg.train.lr_plateau = cfg.train.lr * 2.0;
        assert!(ConfigFile::parse(&cfg.to_toml().unwrap()).is_err());
    }

    #[test]
    fn train_section_is_optional() {
        let flow = canonical_toml(&FlowConfig::tiny()).unwrap();
        let text = format!("[flow]\n{flow}");
        // nested tables of the flow section need their full path
        let text = text
            .replace("[kp]", "[flow.kp]")
            .replace("[stft]", "[flow.stft]");
        let cfg = ConfigFile::parse(&text).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn differing_fields_are_listed() {
        let a = FlowConfig::tiny();
        let mut b = a.clone();
        assert!(differing_fields(&a, &b).unwrap().is_empty());
        b.lvc_channels = 8;
        b.stft.num_mels = 40;
        assert_eq!(
            differing_fields(&a, &b).unwrap(),
            vec!["lvc_channels", "stft.num_mels"]
        );
    }

    #[test]
    fn resolve_reports_unknown_names() {
        let err = ConfigFile::resolve("no-such-preset")
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("no-such-preset") && err.contains("tiny"),
            "{err}"
        );
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        let cfg = ConfigFile::preset("melglow-32").unwrap();
        cfg.save(&path).unwrap();
        assert_eq!(ConfigFile::resolve(path.to_str().unwrap()).unwrap(), cfg);
    }
}
