//! Versioned binary container for model parameters.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "SQSLCKPT" | u32 version | u32 config_len | config JSON
//! u32 tensor_count | per tensor: u16 name_len | name | u64 value_count | f64 values
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoder::{DenseParams, GruParams, ModelConfig, ScorerModel, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SQSLCKPT";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &ScorerModel) -> Vec<u8> {
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    let tensors = model.tensors();
    let total: usize = tensors.iter().map(|(_, t)| t.len() * 8 + 32).sum();
    let mut out = Vec::with_capacity(total + config.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (t, values) in tensors {
        let name = t.name();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, expected: &str) -> Result<Vec<f64>> {
        let len = self.u16()? as usize;
        let name = String::from_utf8_lossy(self.take(len)?).into_owned();
        if name != expected {
            return Err(Error::Checkpoint(format!("expected tensor {expected}, found {name}")));
        }
        let count = self.u64()? as usize;
        let bytes = self.take(count.checked_mul(8).ok_or_else(|| {
            Error::Checkpoint("tensor size overflow".into())
        })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<ScorerModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version} is not supported (expected {VERSION})"
        )));
    }
    let config_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
    config.validate()?;
    let count = r.u32()? as usize;
    let expected = 1 + 3 * config.num_layers + 4;
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, config implies {expected}"
        )));
    }
    let token_embed = r.tensor(&Tensor::TokenEmbed.name())?;
    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        layers.push(GruParams {
            w_input: r.tensor(&Tensor::GruInput(l).name())?,
            w_hidden: r.tensor(&Tensor::GruHidden(l).name())?,
            bias: r.tensor(&Tensor::GruBias(l).name())?,
        });
    }
    let dense = DenseParams {
        layers,
        suffix_weight: r.tensor(&Tensor::SuffixWeight.name())?,
        suffix_bias: r.tensor(&Tensor::SuffixBias.name())?,
        terminator: r.tensor(&Tensor::Terminator.name())?,
        length_embed: r.tensor(&Tensor::LengthEmbed.name())?,
    };
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    ScorerModel::from_parts(config, token_embed, dense)
}

pub fn save(model: &ScorerModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<ScorerModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    from_bytes(&bytes)
}

/// Hex SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
