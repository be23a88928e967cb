//! Little-endian checkpoint format:
//!
//! ```text
//! magic      8 bytes  "TRACTOX\0"
//! version    u32      1
//! cfg_len    u32      byte length of the config block
//! config     cfg_len  k, d_model, n_layers, n_heads, d_ffn, g_in, max_len (u64 each),
//!                     dropout_p (f64), use_cnn3d (u8)
//! cfg_hash   32 bytes SHA-256 of the config block
//! n_params   u32
//! per param: name_len u32, name, ndim u32, dims (u64 each), values (f64 each)
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelParams};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"TRACTOX\0";
const VERSION: u32 = 1;

fn encode_config(c: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(65);
    for v in [c.k, c.d_model, c.n_layers, c.n_heads, c.d_ffn, c.g_in, c.max_len] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&c.dropout_p.to_le_bytes());
    out.push(c.use_cnn3d as u8);
    out
}

/// SHA-256 of the serialised config.
pub fn config_hash(c: &ModelConfig) -> [u8; 32] {
    Sha256::digest(encode_config(c)).into()
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let cfg = encode_config(params.config());
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&config_hash(params.config()));
    out.extend_from_slice(&(params.store().len() as u32).to_le_bytes());
    for p in params.store().iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape.len() as u32).to_le_bytes());
        for d in &p.value.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &p.value.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_config(bytes: &[u8]) -> Result<ModelConfig> {
    if bytes.len() != 65 {
        return Err(Error::format(format!("config block of {} bytes", bytes.len())));
    }
    let mut r = Reader { bytes, pos: 0 };
    let mut c = [0usize; 7];
    for slot in &mut c {
        *slot = usize::try_from(r.u64()?).map_err(|_| Error::format("config count overflows"))?;
    }
    let dropout_p = r.f64()?;
    let use_cnn3d = match r.take(1)?[0] {
        0 => false,
        1 => true,
        b => return Err(Error::format(format!("bad use_cnn3d byte {b}"))),
    };
    let config = ModelConfig {
        k: c[0],
        d_model: c[1],
        n_layers: c[2],
        n_heads: c[3],
        d_ffn: c[4],
        g_in: c[5],
        max_len: c[6],
        dropout_p,
        use_cnn3d,
    };
    config.validate().map_err(|e| Error::format(format!("stored config invalid: {e}")))?;
    Ok(config)
}

/// Decodes a checkpoint. With `expected`, the stored config hash must match
/// the hash of `expected`.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_bytes = r.take(cfg_len)?;
    let stored: [u8; 32] = r.take(32)?.try_into().unwrap();
    let actual: [u8; 32] = Sha256::digest(cfg_bytes).into();
    if stored != actual {
        return Err(Error::format("checkpoint config hash does not match its config block"));
    }
    let config = decode_config(cfg_bytes)?;
    if let Some(want) = expected {
        if config_hash(want) != stored {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint was trained with {config:?}, requested {want:?}"
            )));
        }
    }
    let mut params = ModelParams::init(config, 0)?;
    let n = r.u32()? as usize;
    if n != params.store().len() {
        return Err(Error::format(format!("{n} parameter arrays, expected {}", params.store().len())));
    }
    for p in params.store_mut().iter_mut() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::format("bad parameter name"))?;
        if name != p.name {
            return Err(Error::format(format!("parameter {name:?} where {:?} was expected", p.name)));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != p.value.shape {
            return Err(Error::format(format!("{name}: shape {shape:?}, expected {:?}", p.value.shape)));
        }
        for v in p.value.data.iter_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes after checkpoint"));
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("checkpoint holds non-finite weights".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<ModelParams> {
    decode_checkpoint(&fs::read(path)?, expected)
}
