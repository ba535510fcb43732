//! `FWC1` checkpoints.
//!
//! ```text
//! "FWC1" | u64 config length | config (UTF-8 key=value lines)
//!        | u32 tensor count | { u32 name length | name | FWT1 tensor } * count
//! ```
//!
//! Tensor names are `param.*`, `buf.*` (batch-norm running statistics) and
//! `opt.m.*` / `opt.v.*` (Adam moments). The optimizer step is stored in the
//! config blob as `opt_step`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{ByteReader, Tensor};

use super::config::{parse_kv, take, ModelConfig};
use super::network::Model;
use super::train::AdamW;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FWC1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub opt: AdamW,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut config = self.model.config.to_kv();
        config.push_str(&format!("opt_step={}\n", self.opt.step));
        let mut named: Vec<(String, Tensor)> = Vec::new();
        for (k, t) in self.model.store.params() {
            named.push((format!("param.{k}"), Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap()));
        }
        for (k, t) in self.model.store.buffers() {
            named.push((format!("buf.{k}"), t.clone()));
        }
        for (prefix, moments) in [("opt.m.", &self.opt.m), ("opt.v.", &self.opt.v)] {
            for (k, v) in moments {
                named.push((format!("{prefix}{k}"), Tensor::from_vec(v.clone())));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in &named {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&t.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let len_at = r.offset();
        let len = r.u64("config length")? as usize;
        if len > bytes.len() {
            return Err(Error::Format {
                offset: len_at,
                msg: format!("config length {len} exceeds file size"),
            });
        }
        let cfg_at = r.offset();
        let text = std::str::from_utf8(r.take(len, "config")?).map_err(|e| Error::Format {
            offset: cfg_at + e.valid_up_to() as u64,
            msg: "config is not UTF-8".into(),
        })?;
        let map = parse_kv(text)?;
        let config = ModelConfig::from_map(&map)?;
        let mut opt = AdamW {
            step: take(&map, "opt_step", 0u64)?,
            ..AdamW::default()
        };
        let mut store = ParamStore::new();
        let count = r.u32("tensor count")?;
        for _ in 0..count {
            let name_at = r.offset();
            let n = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(n, "name")?)
                .map_err(|_| Error::Format {
                    offset: name_at,
                    msg: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let t = r.read_tensor()?;
            if let Some(k) = name.strip_prefix("param.") {
                store.insert_param(k, t);
            } else if let Some(k) = name.strip_prefix("buf.") {
                store.insert_buffer(k, t);
            } else if let Some(k) = name.strip_prefix("opt.m.") {
                opt.m.insert(k.to_string(), t.into_data());
            } else if let Some(k) = name.strip_prefix("opt.v.") {
                opt.v.insert(k.to_string(), t.into_data());
            } else {
                return Err(Error::Format {
                    offset: name_at,
                    msg: format!("unknown tensor '{name}'"),
                });
            }
        }
        if r.offset() != bytes.len() as u64 {
            return Err(Error::Format {
                offset: r.offset(),
                msg: "trailing bytes after last tensor".into(),
            });
        }
        let fresh = Model::new(config.clone(), 0)?;
        for (k, t) in fresh.store.params() {
            match store.param(k) {
                Some(s) if s.shape() == t.shape() => {}
                _ => return Err(Error::Config(format!("checkpoint is missing or misshapes parameter '{k}'"))),
            }
        }
        Ok(Checkpoint {
            model: Model { config, store },
            opt,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
