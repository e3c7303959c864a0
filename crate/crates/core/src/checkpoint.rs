//! Policy checkpoints: a little-endian binary container of named row-major
//! arrays plus a JSON metadata sidecar.
//!
//! Binary layout:
//!
//! ```text
//! magic   b"TRCK"
//! version u32
//! count   u32
//! count × { name_len u32, name utf-8, ndim u32, dims u64 × ndim, values f64 × prod(dims) }
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::policy::{MlpParams, PolicyError};

pub const MAGIC: &[u8; 4] = b"TRCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Sidecar written next to `<name>.bin` as `<name>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub env_steps: u64,
    pub updates: u64,
    pub seed: u64,
    /// Hex SHA-256 of the canonical config text the run was started with.
    pub config_hash: String,
    pub obs_dim: usize,
    pub hidden: usize,
    pub act_dim: usize,
}

pub fn config_hash(canonical: &str) -> String {
    Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

pub fn encode(params: &MlpParams) -> Vec<u8> {
    let specs = params.specs();
    let mut out = Vec::with_capacity(16 + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(specs.len() as u32).to_le_bytes());
    for s in &specs {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
        for d in &s.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &params.data[s.offset..s.offset + s.len()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Malformed("truncated".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

struct NamedArray {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn read_arrays(bytes: &[u8]) -> Result<Vec<NamedArray>, CheckpointError> {
    let mut c = Cursor { buf: bytes };
    if c.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = c.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("array name is not utf-8".into()))?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        if n.saturating_mul(8) > c.buf.len() {
            return Err(CheckpointError::Malformed(format!("array {name} overruns the file")));
        }
        let values = (0..n).map(|_| c.f64()).collect::<Result<Vec<_>, _>>()?;
        arrays.push(NamedArray { name, shape, values });
    }
    if !c.buf.is_empty() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", c.buf.len())));
    }
    Ok(arrays)
}

pub fn decode(bytes: &[u8]) -> Result<MlpParams, CheckpointError> {
    let arrays = read_arrays(bytes)?;
    let dim = |name: &str, axis: usize| {
        arrays
            .iter()
            .find(|a| a.name == name)
            .and_then(|a| a.shape.get(axis).copied())
            .ok_or_else(|| CheckpointError::Malformed(format!("missing array {name}")))
    };
    let (obs_dim, hidden, act_dim) = (dim("w1", 0)?, dim("w1", 1)?, dim("w_mu", 1)?);
    let mut params = MlpParams::zeros(obs_dim, hidden, act_dim);
    let specs = params.specs();
    if specs.len() != arrays.len() {
        return Err(CheckpointError::Malformed(format!(
            "expected {} arrays, found {}",
            specs.len(),
            arrays.len()
        )));
    }
    for (s, a) in specs.iter().zip(&arrays) {
        if s.name != a.name || s.shape != a.shape {
            return Err(CheckpointError::Malformed(format!(
                "array {} {:?} does not match expected {} {:?}",
                a.name, a.shape, s.name, s.shape
            )));
        }
        params.data[s.offset..s.offset + s.len()].copy_from_slice(&a.values);
    }
    if !params.is_finite() {
        return Err(PolicyError::NonFinite.into());
    }
    Ok(params)
}

/// Write `path` and its JSON sidecar.
pub fn save(path: &Path, params: &MlpParams, meta: &CheckpointMeta) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::File::create(path)?.write_all(&encode(params))?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(MlpParams, Option<CheckpointMeta>), CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let params = decode(&bytes)?;
    let side = sidecar_path(path);
    let meta = if side.exists() {
        Some(serde_json::from_str(&fs::read_to_string(side)?)?)
    } else {
        None
    };
    Ok((params, meta))
}
