//! Self-describing model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DERLMODL" | u32 version | u64 len, config TOML | 32-byte SHA-256 of the config
//! u64 len, metadata `key=value` lines | u64 param count
//! per param: u32 len, name | u32 rank | u64 dims... | f64 values
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Derl, ModelError, Result};
use crate::config::ModelConfig;
use crate::tensor::Tensor;
use crate::Scalar;

pub const MODEL_MAGIC: &[u8; 8] = b"DERLMODL";
pub const MODEL_VERSION: u32 = 1;

/// Lowercase hex SHA-256 of the canonical config text.
pub fn config_hash(cfg: &ModelConfig) -> String {
    hex(&Sha256::digest(cfg.to_toml().as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Decoded model file contents.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub config: ModelConfig,
    pub config_hash: String,
    pub metadata: Vec<(String, String)>,
    pub params: Vec<(String, Tensor<f64>)>,
}

impl ModelFile {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

pub fn write_model<T: Scalar>(model: &Derl<T>, metadata: &[(String, String)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let cfg = model.config.to_toml();
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&Sha256::digest(cfg.as_bytes()));
    let meta: String = metadata.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(model.store.len() as u64).to_le_bytes());
    for (_, name, t) in model.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> ModelError {
        ModelError::File {
            path: self.path.to_string(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| self.err(format!("{what} {v} does not fit in memory")))
    }

    fn text(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let bytes = self.take(n, what)?;
        std::str::from_utf8(bytes).map_err(|_| self.err(format!("{what} is not valid UTF-8")))
    }
}

/// Parses and validates a model file image; `path` only labels errors.
pub fn read_model(bytes: &[u8], path: &str) -> Result<ModelFile> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(8, "magic")? != MODEL_MAGIC {
        return Err(r.err("bad magic: not a model file"));
    }
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(r.err(format!("unsupported version {version}, expected {MODEL_VERSION}")));
    }
    let n = r.u64("config length")?;
    let cfg_text = r.text(n, "config")?;
    let stored = hex(r.take(32, "config hash")?);
    let actual = hex(&Sha256::digest(cfg_text.as_bytes()));
    if stored != actual {
        return Err(r.err("header config hash does not match the embedded config (file corrupted)"));
    }
    let config: ModelConfig = toml::from_str(cfg_text).map_err(|e| r.err(format!("embedded config: {e}")))?;
    let n = r.u64("metadata length")?;
    let metadata = r
        .text(n, "metadata")?
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let count = r.u64("parameter count")?;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = r.text(n, "parameter name")?.to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("dimension")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.err(format!("{name}: shape overflows")))?;
        let bytes_len = numel
            .checked_mul(8)
            .ok_or_else(|| r.err(format!("{name}: shape overflows")))?;
        let raw = r.take(bytes_len, &name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| r.err(format!("{name}: {e}")))?;
        params.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ModelFile {
        config,
        config_hash: actual,
        metadata,
        params,
    })
}

impl<T: Scalar> Derl<T> {
    /// Rebuilds a model from decoded file contents.
    pub fn from_file(file: &ModelFile) -> Result<Self> {
        let mut model = Derl::new(file.config.clone(), 0)?;
        if file.params.len() != model.store.len() {
            return Err(ModelError::File {
                path: String::new(),
                reason: format!(
                    "file holds {} parameters, config implies {}",
                    file.params.len(),
                    model.store.len()
                ),
            });
        }
        for (name, t) in &file.params {
            let id = model.store.find(name).ok_or_else(|| ModelError::File {
                path: String::new(),
                reason: format!("unexpected parameter {name}"),
            })?;
            model.store.set(id, t.cast())?;
        }
        Ok(model)
    }
}

pub fn save_model<T: Scalar>(model: &Derl<T>, metadata: &[(String, String)], path: &Path) -> Result<()> {
    fs::write(path, write_model(model, metadata)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a model; with `expected` set, refuses a file whose config hash
/// differs from that config's.
pub fn load_model<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<(Derl<T>, ModelFile)> {
    let label = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: label.clone(),
        source,
    })?;
    let file = read_model(&bytes, &label)?;
    if let Some(cfg) = expected {
        let want = config_hash(cfg);
        if want != file.config_hash {
            return Err(ModelError::ConfigMismatch {
                expected: want,
                found: file.config_hash.clone(),
            });
        }
    }
    let model = Derl::from_file(&file).map_err(|e| match e {
        ModelError::File { reason, .. } => ModelError::File { path: label.clone(), reason },
        other => other,
    })?;
    Ok((model, file))
}
