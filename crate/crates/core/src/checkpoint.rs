//! Versioned binary checkpoints: configuration snapshot, seed, named parameter
//! blobs with their Adam moments, and the resumable training state.
//!
//! Layout (little endian): `"THGM"`, u16 version, u32 config length, config
//! JSON, u64 seed, u64 optimizer step, u32 tensor count, then per tensor u16
//! name length, name, u8 rank, u32 dims, u64 value count and three f32 blobs
//! (value, first moment, second moment); finally u32 state length and the
//! training state JSON (`null` when absent).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::model::{GestureModel, ModelConfig};
use crate::numerics::{ParamStore, Tensor};
use crate::training::{TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"THGM";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Snapshot {
    model: ModelConfig,
    train: Option<TrainConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub seed: u64,
    pub params: ParamStore<f32>,
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn from_model(model: &GestureModel, train: Option<TrainConfig>, seed: u64, state: Option<TrainState>) -> Self {
        Checkpoint {
            model: model.config.clone(),
            train,
            seed,
            params: model.params.clone(),
            state,
        }
    }

    pub fn into_model(self) -> Result<GestureModel> {
        GestureModel::from_params(self.model, self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let snapshot = serde_json::to_vec(&Snapshot {
            model: self.model.clone(),
            train: self.train.clone(),
        })
        .map_err(|e| Error::Data(e.to_string()))?;
        out.extend_from_slice(&(snapshot.len() as u32).to_le_bytes());
        out.extend_from_slice(&snapshot);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.params.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            let name_len = u16::try_from(name.len()).map_err(|_| Error::Data(format!("parameter name {name} too long")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.value.rank() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&(p.value.len() as u64).to_le_bytes());
            for blob in [&p.value, &p.first_moment, &p.second_moment] {
                for v in blob.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let state = serde_json::to_vec(&self.state).map_err(|e| Error::Data(e.to_string()))?;
        out.extend_from_slice(&(state.len() as u32).to_le_bytes());
        out.extend_from_slice(&state);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            }
            .into());
        }
        let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            }
            .into());
        }
        let len = r.u32("config")? as usize;
        let snapshot: Snapshot = serde_json::from_slice(r.take(len, "config")?)
            .map_err(|e| FormatError::Malformed(format!("config snapshot: {e}")))?;
        let seed = r.u64("header")?;
        let step = r.u64("header")?;
        let count = r.u32("header")? as usize;
        let mut params = ParamStore::new();
        params.step = step;
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2, "tensor header")?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| FormatError::Malformed("tensor name is not utf-8".into()))?
                .to_string();
            let rank = r.take(1, "tensor header")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("tensor header")? as usize);
            }
            let n = r.u64("tensor header")? as usize;
            if shape.iter().product::<usize>() != n {
                return Err(FormatError::Malformed(format!("tensor {name}: {n} values for shape {shape:?}")).into());
            }
            let mut blobs = Vec::with_capacity(3);
            for _ in 0..3 {
                let raw = r.take(n * 4, "tensor data")?;
                let data: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                blobs.push(Tensor::from_vec(&shape, data).map_err(|e| FormatError::Malformed(e.to_string()))?);
            }
            let v = blobs.pop().expect("three blobs");
            let m = blobs.pop().expect("three blobs");
            params
                .insert(name.clone(), blobs.pop().expect("three blobs"))
                .map_err(|e| FormatError::Malformed(e.to_string()))?;
            let p = params.param_mut(&name).expect("just inserted");
            p.first_moment = m;
            p.second_moment = v;
        }
        let len = r.u32("training state")? as usize;
        let state: Option<TrainState> = serde_json::from_slice(r.take(len, "training state")?)
            .map_err(|e| FormatError::Malformed(format!("training state: {e}")))?;
        if r.pos != bytes.len() {
            return Err(FormatError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)).into());
        }
        Ok(Checkpoint {
            model: snapshot.model,
            train: snapshot.train,
            seed,
            params,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let rest = self.buf.len() - self.pos;
        if rest < n {
            return Err(FormatError::Truncated {
                what,
                expected: n,
                actual: rest,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
