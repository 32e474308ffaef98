//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "SPNCKPT1"
//! header_len   u32      followed by UTF-8 `key=value` lines
//! block_count  u32
//! per block:   u32 name_len, name bytes, u8 trainable, u32 rank,
//!              rank × u64 dims, product(dims) × f64 values
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Architecture, Forecaster, ModelConfig, ModelError, Parameter};
use crate::autodiff::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPNCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub trainable: bool,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub blocks: Vec<Block>,
}

fn err(m: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(m.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| err("truncated"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| err("truncated"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String, ModelError> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(|_| err("truncated"))?;
    String::from_utf8(b).map_err(|_| err("invalid UTF-8"))
}

impl Checkpoint {
    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn push(&mut self, name: impl Into<String>, trainable: bool, tensor: Tensor) {
        self.blocks.push(Block {
            name: name.into(),
            trainable,
            tensor,
        });
    }

    pub fn write(&self, w: &mut impl Write) -> Result<(), ModelError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let mut header = String::new();
        for (k, v) in &self.header {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(err(format!("header entry {k:?} cannot be encoded")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        w.write_all(&(self.blocks.len() as u32).to_le_bytes())?;
        for b in &self.blocks {
            w.write_all(&(b.name.len() as u32).to_le_bytes())?;
            w.write_all(b.name.as_bytes())?;
            w.write_all(&[u8::from(b.trainable)])?;
            w.write_all(&(b.tensor.rank() as u32).to_le_bytes())?;
            for &d in b.tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(b.tensor.len() * 8);
            for v in b.tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| err("truncated"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(err("not a checkpoint file"));
        }
        let len = read_u32(r)? as usize;
        let text = read_string(r, len)?;
        let mut header = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("bad header line {line:?}")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = read_u32(r)?;
        let mut blocks = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let name = read_string(r, name_len)?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag).map_err(|_| err("truncated"))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)
                .map_err(|_| err(format!("truncated block {name}")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blocks.push(Block {
                name,
                trainable: flag[0] != 0,
                tensor: Tensor::new(shape, data)?,
            });
        }
        Ok(Self { header, blocks })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write(&mut v).expect("writing to memory");
        v
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        Self::read(&mut &bytes[..])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T, ModelError> {
        self.header
            .get(key)
            .ok_or_else(|| err(format!("missing header key {key}")))?
            .parse()
            .map_err(|_| err(format!("bad value for {key}")))
    }
}

impl Forecaster {
    /// Header with the model configuration and one block per parameter.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = self.config();
        let mut ck = Checkpoint::default();
        let h = &mut ck.header;
        h.insert("architecture".into(), c.architecture.label().into());
        h.insert("m_in".into(), c.m_in.to_string());
        h.insert("m_out".into(), c.m_out.to_string());
        h.insert("n_features".into(), c.n_features.to_string());
        h.insert("hidden".into(), c.hidden.to_string());
        h.insert(
            "cnn_channels".into(),
            format!("{},{}", c.cnn_channels.0, c.cnn_channels.1),
        );
        h.insert("cnn_kernel".into(), c.cnn_kernel.to_string());
        h.insert("cnn_padding".into(), c.cnn_padding.to_string());
        for p in self.parameters() {
            ck.push(format!("model.{}", p.name), p.trainable, p.tensor.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let arch: String = ck.get("architecture")?;
        let architecture = Architecture::from_label(&arch)
            .ok_or_else(|| err(format!("unknown architecture {arch}")))?;
        let channels: String = ck.get("cnn_channels")?;
        let (c1, c2) = channels
            .split_once(',')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
            .ok_or_else(|| err("bad value for cnn_channels"))?;
        let config = ModelConfig {
            architecture,
            m_in: ck.get("m_in")?,
            m_out: ck.get("m_out")?,
            n_features: ck.get("n_features")?,
            hidden: ck.get("hidden")?,
            cnn_channels: (c1, c2),
            cnn_kernel: ck.get("cnn_kernel")?,
            cnn_padding: ck.get("cnn_padding")?,
        };
        let mut model = Forecaster::zeros(config)?;
        let names: Vec<String> = model.parameters().iter().map(|p| p.name.clone()).collect();
        for name in names {
            let block = ck
                .block(&format!("model.{name}"))
                .ok_or_else(|| err(format!("missing block model.{name}")))?;
            let p: &mut Parameter = model.parameter_mut(&name).expect("listed");
            if p.tensor.shape() != block.tensor.shape() || p.trainable != block.trainable {
                return Err(err(format!(
                    "block model.{name} does not match the configuration"
                )));
            }
            p.tensor = block.tensor.clone();
        }
        Ok(model)
    }
}
