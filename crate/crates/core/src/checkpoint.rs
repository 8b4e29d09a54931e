//! Binary checkpoint: configuration, named parameter tensors and optional
//! optimizer state, protected by a CRC32 footer.
//!
//! ```text
//! "MGCK" | version u32 | config_len u32 | config (TOML, sorted keys)
//! | n_tensors u32 | { name_len u32 | name | ndim u32 | dims u32… | f32… }
//! | has_train_state u8 | [train state] | crc32 u32
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::flow::{FlowConfig, MelGlow};
use crate::params::ParamSet;
use crate::train::{AdamState, PlateauState, TrainConfig, TrainState};
use crate::{Error, Real, Result, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Configuration block stored in a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub flow: FlowConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

/// Optimizer and loop state needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedTrainState {
    pub state: TrainState,
    pub adam: AdamState<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    /// Parameters followed by buffers, in model visit order.
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub train_state: Option<SavedTrainState>,
}

/// Serialise a value as TOML with keys in sorted order.
pub fn canonical_toml<S: Serialize>(value: &S) -> Result<String> {
    let v = toml::Value::try_from(value).map_err(|e| Error::config(e.to_string()))?;
    toml::to_string(&v).map_err(|e| Error::config(e.to_string()))
}

impl Checkpoint {
    pub fn from_model<T: Real>(
        model: &MelGlow<T>,
        train: Option<TrainConfig>,
        train_state: Option<SavedTrainState>,
    ) -> Self {
        let mut tensors = Vec::new();
        model.visit_params("", &mut |n, t| tensors.push((n, t.cast())));
        model.visit_buffers("", &mut |n, t| tensors.push((n, t.cast())));
        Self {
            config: CheckpointConfig {
                flow: model.config.clone(),
                train,
            },
            tensors,
            train_state,
        }
    }

    /// Build a model from the stored configuration and fill in every tensor.
    pub fn to_model<T: Real>(&self) -> Result<MelGlow<T>> {
        // every tensor is overwritten below
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = MelGlow::<T>::new(&self.config.flow, &mut rng)?;
        let mut stored = self.tensors.iter();
        let mut failure: Option<Error> = None;
        let mut fill = |name: String, t: &mut Tensor<T>| {
            if failure.is_some() {
                return;
            }
            match stored.next() {
                Some((n, s)) if *n == name && s.shape() == t.shape() => *t = s.cast(),
                Some((n, s)) => {
                    failure = Some(Error::Checkpoint(format!(
                        "expected tensor {name} {:?}, found {n} {:?}",
                        t.shape(),
                        s.shape()
                    )))
                }
                None => failure = Some(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        };
        model.visit_params_mut("", &mut fill);
        model.visit_buffers_mut("", &mut fill);
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some((n, _)) = stored.next() {
            return Err(Error::Checkpoint(format!("unexpected extra tensor {n}")));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        let text = canonical_toml(&self.config)?;
        write_bytes(&mut out, text.as_bytes())?;
        out.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            write_bytes(&mut out, name.as_bytes())?;
            out.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                out.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.data() {
                out.write_f32::<LittleEndian>(v)?;
            }
        }
        match &self.train_state {
            None => out.write_u8(0)?,
            Some(ts) => {
                out.write_u8(1)?;
                let s = &ts.state;
                out.write_u64::<LittleEndian>(s.step)?;
                out.write_f64::<LittleEndian>(s.lr)?;
                out.write_f64::<LittleEndian>(s.plateau.best)?;
                out.write_u64::<LittleEndian>(s.plateau.bad_evals as u64)?;
                out.write_u32::<LittleEndian>(s.non_finite_streak)?;
                out.write_u64::<LittleEndian>(s.rejected_steps)?;
                out.write_u64::<LittleEndian>(ts.adam.step)?;
                out.write_u64::<LittleEndian>(ts.adam.skipped)?;
                out.write_u64::<LittleEndian>(ts.adam.m.len() as u64)?;
                for v in ts.adam.m.iter().chain(&ts.adam.v) {
                    out.write_f32::<LittleEndian>(*v)?;
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.write_u32::<LittleEndian>(crc)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, footer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(footer.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("CRC mismatch: file is corrupt".into()));
        }
        let mut r = Cursor::new(body);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let text = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let config: CheckpointConfig =
            toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let shape = (0..ndim)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let mut data = vec![0f32; len];
            r.read_f32_into::<LittleEndian>(&mut data)?;
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        let train_state = match r.read_u8()? {
            0 => None,
            1 => {
                let step = r.read_u64::<LittleEndian>()?;
                let lr = r.read_f64::<LittleEndian>()?;
                let best = r.read_f64::<LittleEndian>()?;
                let bad_evals = r.read_u64::<LittleEndian>()? as usize;
                let non_finite_streak = r.read_u32::<LittleEndian>()?;
                let rejected_steps = r.read_u64::<LittleEndian>()?;
                let adam_step = r.read_u64::<LittleEndian>()?;
                let skipped = r.read_u64::<LittleEndian>()?;
                let len = r.read_u64::<LittleEndian>()? as usize;
                let mut m = vec![0f32; len];
                let mut v = vec![0f32; len];
                r.read_f32_into::<LittleEndian>(&mut m)?;
                r.read_f32_into::<LittleEndian>(&mut v)?;
                Some(SavedTrainState {
                    state: TrainState {
                        step,
                        lr,
                        plateau: PlateauState { best, bad_evals },
                        non_finite_streak,
                        rejected_steps,
                    },
                    adam: AdamState {
                        m,
                        v,
                        step: adam_step,
                        skipped,
                    },
                })
            }
            other => return Err(Error::Checkpoint(format!("bad train-state flag {other}"))),
        };
        if (r.position() as usize) != body.len() {
            return Err(Error::Checkpoint("trailing bytes before footer".into()));
        }
        Ok(Self {
            config,
            tensors,
            train_state,
        })
    }

    /// Write atomically (temporary file, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn write_bytes(out: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    out.write_u32::<LittleEndian>(b.len() as u32)?;
    out.extend_from_slice(b);
    Ok(())
}

fn read_bytes(r: &mut Cursor<&[u8]>) -> Result<Vec<u8>> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(Error::Checkpoint("truncated block".into()));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    Ok(b)
}
