//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SEQDGCKP"
//! version  u32
//! config   u64 length + UTF-8 JSON (must hold a "model" object)
//! tensors  u64 count, then per tensor:
//!            u32 name length + UTF-8 name
//!            u8 trainable flag
//!            u32 rank, rank × u64 extents
//!            product(extents) × f64
//! rng      u64 length + opaque bytes
//! ```

use std::path::Path;

use serde_json::Value;

use super::params::TEXT_PREFIXES;
use super::{ModelConfig, ModelError, Result, SeqDgModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SEQDGCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    config: String,
    pub tensors: Vec<CheckpointTensor>,
    pub rng_state: Vec<u8>,
}

impl Checkpoint {
    /// `config` is echoed verbatim; its `"model"` entry is replaced by the
    /// model's own configuration.
    pub fn from_model(
        model: &SeqDgModel,
        mut config: Value,
        frozen: Vec<(String, Tensor)>,
        rng_state: Vec<u8>,
    ) -> Result<Self> {
        let model_cfg = serde_json::to_value(model.config())
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        match &mut config {
            Value::Object(map) => {
                map.insert("model".into(), model_cfg);
            }
            _ => config = serde_json::json!({ "model": model_cfg }),
        }
        let mut tensors: Vec<CheckpointTensor> = model
            .named_tensors()
            .into_iter()
            .map(|(name, value)| CheckpointTensor {
                name,
                trainable: true,
                value,
            })
            .collect();
        tensors.extend(frozen.into_iter().map(|(name, value)| CheckpointTensor {
            name,
            trainable: false,
            value,
        }));
        Ok(Checkpoint {
            config: config.to_string(),
            tensors,
            rng_state,
        })
    }

    pub fn config_json(&self) -> &str {
        &self.config
    }

    pub fn config_value(&self) -> Result<Value> {
        serde_json::from_str(&self.config).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let v = self.config_value()?;
        let model = v
            .get("model")
            .cloned()
            .ok_or_else(|| ModelError::Checkpoint("config has no \"model\" entry".into()))?;
        serde_json::from_value(model).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.value)
    }

    pub fn to_model(&self) -> Result<SeqDgModel> {
        let tensors = self
            .tensors
            .iter()
            .filter(|t| t.trainable)
            .map(|t| (t.name.clone(), t.value.clone()))
            .collect();
        SeqDgModel::from_tensors(self.model_config()?, tensors)
    }

    /// Drops the text decoder, the token head and the frozen narration table.
    pub fn strip_text(&mut self) {
        self.tensors
            .retain(|t| !TEXT_PREFIXES.iter().any(|p| t.name.starts_with(p)));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(u8::from(t.trainable));
            out.extend_from_slice(&(t.value.shape().len() as u32).to_le_bytes());
            for &d in t.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.value.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.rng_state.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.rng_state);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let len = r.u64()? as usize;
        let config = r.string(len)?;
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = r.string(len)?;
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(ModelError::Checkpoint(format!("bad flag {b}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| {
                ModelError::Checkpoint("tensor size overflow".into())
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let value = Tensor::new(shape, data)
                .map_err(|e| ModelError::Checkpoint(format!("{name}: {e}")))?;
            tensors.push(CheckpointTensor {
                name,
                trainable,
                value,
            });
        }
        let len = r.u64()? as usize;
        let rng_state = r.take(len)?.to_vec();
        if r.pos != bytes.len() {
            return Err(ModelError::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config,
            tensors,
            rng_state,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| ModelError::Checkpoint("invalid UTF-8".into()))
    }
}
