//! Checkpoint directories: `meta.json` (normative schema) and `params.bin`.
//!
//! `params.bin` layout, little endian: magic `CTKEPRM1`, `u32` tensor count,
//! then per tensor `u32` name length, name bytes, `u64` element count and
//! the `f64` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::{ModelDims, ModelParams};
use crate::store::TkgDataset;

const MAGIC: &[u8; 8] = b"CTKEPRM1";
pub const META_FILE: &str = "meta.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub dataset_fingerprint: String,
    /// Base relation names, id order. Numeric strings when the dataset had no names.
    pub relations: Vec<String>,
    pub relation_names_known: bool,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(ds: &TkgDataset, config: &TrainConfig, params: ModelParams, epoch: usize) -> Self {
        let rel = ds.relations();
        let relations = (0..rel.len() as u32).map(|r| rel.name(r)).collect();
        Self {
            meta: CheckpointMeta {
                config: config.clone(),
                dims: params.dims,
                dataset_fingerprint: ds.fingerprint(),
                relations,
                relation_names_known: rel.has_names(),
                epoch,
            },
            params,
        }
    }

    pub fn num_base_relations(&self) -> usize {
        self.meta.relations.len()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&self.meta)?)?;
        let mut buf = Vec::with_capacity(16 + self.params.num_scalars() * 8);
        buf.extend_from_slice(MAGIC);
        let tensors = self.params.tensors();
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, data) in tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(dir.join(PARAMS_FILE))?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(META_FILE);
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&meta_path).map_err(|e| {
            Error::Checkpoint(format!("{}: {e}", meta_path.display()))
        })?)?;
        let mut bytes = Vec::new();
        fs::File::open(dir.join(PARAMS_FILE))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(PARAMS_FILE).display())))?
            .read_to_end(&mut bytes)?;
        let mut params = ModelParams::init(meta.dims, 0);
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad parameter blob magic".into()));
        }
        let count = cur.u32()? as usize;
        let mut slots = params.tensors_mut();
        if count != slots.len() {
            return Err(Error::Checkpoint(format!(
                "blob has {count} tensors, model expects {}",
                slots.len()
            )));
        }
        for (expected, dst) in slots.iter_mut() {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            if name != expected {
                return Err(Error::Checkpoint(format!("expected tensor {expected}, found {name}")));
            }
            let len = cur.u64()? as usize;
            if len != dst.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has {len} values, expected {}",
                    dst.len()
                )));
            }
            for v in dst.iter_mut() {
                *v = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
            }
        }
        drop(slots);
        Ok(Self { meta, params })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint("truncated parameter blob".into()));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
