//! Binary checkpoints: `PCXP1` magic, a JSON header, a tensor table and a
//! raw little-endian payload.

use std::collections::BTreeMap;
use std::path::Path;

use numcore::{RngState, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, RunConfig};
use crate::error::{Error, Result};
use crate::eval::Protocol;
use crate::model::Model;
use crate::params::{Owner, ParamStore};
use crate::train::OptimState;

pub const MAGIC: &[u8; 5] = b"PCXP1";
const DTYPE_F32: u8 = 0;
const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub run: Option<RunConfig>,
    /// Completed SSRL epochs.
    pub epoch: usize,
    /// Completed SSRL optimizer steps.
    pub step: usize,
    pub rng: Option<RngState>,
    pub frozen_hash: String,
    pub warmup_accuracy: Option<f64>,
    /// Present when the checkpoint carries a fine-tuned classification head.
    #[serde(default)]
    pub head: Option<HeadInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadInfo {
    pub protocol: Protocol,
    pub classes: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: CheckpointMeta,
    optim_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
    pub optim: Option<OptimState>,
}

struct Entry<'a> {
    name: String,
    trainable: bool,
    owner: Owner,
    tensor: &'a Tensor<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.cfg.clone(),
            meta: self.meta.clone(),
            optim_step: self.optim.as_ref().map(|o| o.step),
        };
        let json = serde_json::to_vec(&header)?;
        let mut entries: Vec<Entry<'_>> = self
            .model
            .params
            .iter()
            .map(|(n, p)| Entry { name: n.clone(), trainable: p.trainable, owner: p.owner, tensor: &p.tensor })
            .collect();
        if let Some(o) = &self.optim {
            for (n, t) in &o.m {
                let owner = self.model.params.get(n)?.owner;
                entries.push(Entry { name: format!("{OPTIM_M}{n}"), trainable: false, owner, tensor: t });
            }
            for (n, t) in &o.v {
                let owner = self.model.params.get(n)?.owner;
                entries.push(Entry { name: format!("{OPTIM_V}{n}"), trainable: false, owner, tensor: t });
            }
        }
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        put_u32(&mut out, entries.len())?;
        let mut offset = 0u64;
        for e in &entries {
            put_u32(&mut out, e.name.len())?;
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&[DTYPE_F32, e.trainable as u8, e.owner.code()]);
            put_u32(&mut out, e.tensor.rank())?;
            for &d in e.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * e.tensor.numel() as u64;
        }
        for e in &entries {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != MAGIC {
            return Err(Error::Checkpoint("bad magic (not a PCXP1 checkpoint)".into()));
        }
        let jlen = r.u32()?;
        let header: Header = serde_json::from_slice(r.take(jlen)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = r.u32()?;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()?;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let flags = r.take(3)?;
            if flags[0] != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("{name}: unsupported dtype {}", flags[0])));
            }
            let owner = Owner::from_code(flags[2])
                .ok_or_else(|| Error::Checkpoint(format!("{name}: bad owner code {}", flags[2])))?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            table.push((name, flags[1] != 0, owner, shape, offset));
        }
        let payload = &bytes[r.pos..];
        let mut params = ParamStore::new();
        let mut optim_m = BTreeMap::new();
        let mut optim_v = BTreeMap::new();
        for (name, trainable, owner, shape, offset) in table {
            let n: usize = shape.iter().product();
            let raw = payload
                .get(offset..offset + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: payload out of range")))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(data, shape).map_err(|e| Error::Checkpoint(e.to_string()))?;
            if let Some(base) = name.strip_prefix(OPTIM_M) {
                optim_m.insert(base.to_string(), t);
            } else if let Some(base) = name.strip_prefix(OPTIM_V) {
                optim_v.insert(base.to_string(), t);
            } else {
                params.insert(name, t, owner, trainable)?;
            }
        }
        let optim = header.optim_step.map(|step| OptimState { step, m: optim_m, v: optim_v });
        Ok(Self { model: Model { cfg: header.model, params }, meta: header.meta, optim })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the stored architecture equals `expected`.
    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.check_model(expected)?;
        Ok(ck)
    }

    pub fn check_model(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model.cfg != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint architecture does not match the requested preset (stored dim {} x {} layers, expected dim {} x {} layers)",
                self.model.cfg.dim, self.model.cfg.layers, expected.dim, expected.layers
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
