//! Binary checkpoints.
//!
//! ```text
//! "LTTE"  u32 version
//! u32 meta_len   meta (TOML: model, schedule, optional data/normalizer/train)
//! u32 n_params   { u32 name_len, name, u8 trainable, u32 ndim, u32 dims.., f32 values.. }
//! u8 has_optimizer [ u64 step, u32 n, { u32 name_len, name, u64 t, f32 m.., f32 v.. } ]
//! u64 seed, u64 stream, u64 word_pos_hi, u64 word_pos_lo     resume RNG
//! u64 step
//! u32 crc32 of everything above
//! ```
//!
//! All integers and floats are little-endian.

use super::{Model, ModelConfig};
use crate::data::{read_exact, read_u32, DatasetSpec, Normalizer};
use crate::error::{Error, LoadFailure, Result};
use crate::rng::{Rng, RngState};
use crate::schedule::TimestepSchedule;
use crate::tensor::Tensor;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CKPT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LTTE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub schedule: TimestepSchedule,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub data: Option<DatasetSpec>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub normalizer: Option<Normalizer>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train: Option<TrainConfig>,
}

/// Adam moments for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamMoments {
    pub name: String,
    /// Updates applied to this parameter so far.
    pub t: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: Vec<ParamMoments>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model<f32>,
    pub optimizer: Option<OptimizerState>,
    pub rng: RngState,
    pub step: u64,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn corrupt(msg: impl Into<String>) -> LoadFailure {
    LoadFailure::Corrupt(msg.into())
}

fn get_u8(r: &mut &[u8]) -> Result<u8, LoadFailure> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn get_u64(r: &mut &[u8]) -> Result<u64, LoadFailure> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> Result<String, LoadFailure> {
    let n = read_u32(r)? as usize;
    if n > r.len() {
        return Err(corrupt("string runs past end of file"));
    }
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| corrupt("string is not UTF-8"))
}

fn get_f32s(r: &mut &[u8], n: usize) -> Result<Vec<f32>, LoadFailure> {
    if n.checked_mul(4).is_none_or(|bytes| bytes > r.len()) {
        return Err(corrupt("tensor runs past end of file"));
    }
    let (head, tail) = r.split_at(n * 4);
    *r = tail;
    Ok(head
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl CheckpointMeta {
    pub fn new(model: &ModelConfig) -> Result<Self> {
        Ok(Self {
            model: model.clone(),
            schedule: model.schedule()?,
            data: None,
            normalizer: None,
            train: None,
        })
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))
    }
}

impl Checkpoint {
    /// A checkpoint of a freshly built or trained model with no optimizer
    /// state.
    pub fn new(model: Model<f32>, meta: CheckpointMeta) -> Self {
        Self {
            meta,
            model,
            optimizer: None,
            rng: Rng::new(0).state(),
            step: 0,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = self.meta.to_text()?;
        let mut buf = Vec::with_capacity(self.model.params().numel() * 4 + meta.len() + 1024);
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, CKPT_VERSION);
        put_str(&mut buf, &meta);
        let params = self.model.params();
        put_u32(&mut buf, params.len() as u32);
        for p in params.iter() {
            put_str(&mut buf, &p.name);
            buf.push(p.trainable as u8);
            put_u32(&mut buf, p.value.ndim() as u32);
            for &d in p.value.shape() {
                put_u32(&mut buf, d as u32);
            }
            put_f32s(&mut buf, p.value.data());
        }
        match &self.optimizer {
            None => buf.push(0),
            Some(opt) => {
                buf.push(1);
                put_u64(&mut buf, opt.step);
                put_u32(&mut buf, opt.moments.len() as u32);
                for m in &opt.moments {
                    put_str(&mut buf, &m.name);
                    put_u64(&mut buf, m.t);
                    put_f32s(&mut buf, &m.m);
                    put_f32s(&mut buf, &m.v);
                }
            }
        }
        for v in [
            self.rng.seed,
            self.rng.stream,
            self.rng.word_pos_hi,
            self.rng.word_pos_lo,
        ] {
            put_u64(&mut buf, v);
        }
        put_u64(&mut buf, self.step);
        let crc = crc32fast::hash(&buf);
        put_u32(&mut buf, crc);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LoadFailure> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(LoadFailure::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(LoadFailure::Version {
                found: version,
                expected: CKPT_VERSION,
            });
        }
        let meta_text = get_str(&mut r)?;
        let meta: CheckpointMeta = toml::from_str(&meta_text).map_err(|e| corrupt(format!("metadata: {e}")))?;

        let n = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = get_str(&mut r)?;
            let trainable = get_u8(&mut r)? != 0;
            let ndim = read_u32(&mut r)? as usize;
            if ndim > 8 {
                return Err(corrupt(format!("{name}: {ndim} dims")));
            }
            let dims = (0..ndim)
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let vals = get_f32s(&mut r, len.ok_or_else(|| corrupt("shape overflows"))?)?;
            tensors.push((name, trainable, dims, vals));
        }
        let optimizer = match get_u8(&mut r)? {
            0 => None,
            1 => {
                let step = get_u64(&mut r)?;
                let count = read_u32(&mut r)? as usize;
                let mut moments = Vec::with_capacity(count.min(1 << 16));
                for _ in 0..count {
                    let name = get_str(&mut r)?;
                    let t = get_u64(&mut r)?;
                    let len = tensors
                        .iter()
                        .find(|x| x.0 == name)
                        .map(|x| x.3.len())
                        .ok_or_else(|| corrupt(format!("moments for unknown parameter {name}")))?;
                    let m = get_f32s(&mut r, len)?;
                    let v = get_f32s(&mut r, len)?;
                    moments.push(ParamMoments { name, t, m, v });
                }
                Some(OptimizerState { step, moments })
            }
            other => return Err(corrupt(format!("optimizer flag {other}"))),
        };
        let rng = RngState {
            seed: get_u64(&mut r)?,
            stream: get_u64(&mut r)?,
            word_pos_hi: get_u64(&mut r)?,
            word_pos_lo: get_u64(&mut r)?,
        };
        let step = get_u64(&mut r)?;
        let body_len = bytes.len() - r.len();
        let stored = read_u32(&mut r)?;
        if !r.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", r.len())));
        }
        if crc32fast::hash(&bytes[..body_len]) != stored {
            return Err(LoadFailure::Checksum);
        }

        meta.model
            .validate()
            .map_err(|e| corrupt(format!("stored config invalid: {e}")))?;
        if meta.model.schedule().ok().as_ref() != Some(&meta.schedule) {
            return Err(LoadFailure::Mismatch(
                "stored schedule does not match stored model config".into(),
            ));
        }
        let mut model = Model::<f32>::build(&meta.model, &mut Rng::new(0)).map_err(|e| corrupt(e.to_string()))?;
        if tensors.len() != model.params().len() {
            return Err(LoadFailure::Mismatch(format!(
                "file has {} parameters, config implies {}",
                tensors.len(),
                model.params().len()
            )));
        }
        for (name, trainable, dims, vals) in tensors {
            let Some(p) = model.params().by_name(&name) else {
                return Err(LoadFailure::Mismatch(format!("unexpected parameter {name}")));
            };
            if p.trainable != trainable {
                return Err(LoadFailure::Mismatch(format!("{name}: trainable flag differs")));
            }
            let t = Tensor::new(&dims, vals).map_err(|e| corrupt(e.to_string()))?;
            model
                .params_mut()
                .set(&name, t)
                .map_err(|e| LoadFailure::Mismatch(e.to_string()))?;
        }
        Ok(Self {
            meta,
            model,
            optimizer,
            rng,
            step,
        })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            Error::io(&tmp, e)
        })?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }

    /// [`Checkpoint::load`], refusing files built for a different model.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if &ckpt.meta.model != expected {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: LoadFailure::Mismatch(format!(
                    "stored model has layers={} groups={} hidden={} heads={}, expected layers={} groups={} hidden={} heads={}",
                    ckpt.meta.model.layers,
                    ckpt.meta.model.groups,
                    ckpt.meta.model.hidden,
                    ckpt.meta.model.heads,
                    expected.layers,
                    expected.groups,
                    expected.hidden,
                    expected.heads
                )),
            });
        }
        Ok(ckpt)
    }
}
