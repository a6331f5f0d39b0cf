//! Binary container shared by model checkpoints and feature-extractor weights.
//!
//! ```text
//! magic        8 bytes   ("DSMRCKPT" or "DSMRFEAT")
//! version      u16 LE
//! manifest_len u32 LE
//! manifest     UTF-8, one `key=value` per line
//! payload      f32 LE tensors, concatenated in manifest order
//! ```
//!
//! Tensors are declared in the manifest as `tensor.<i>=<name>:<d0>x<d1>x...`
//! with `i` counting from 0 without gaps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 8] = b"DSMRCKPT";
pub const EXTRACTOR_MAGIC: &[u8; 8] = b"DSMRFEAT";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 8],
    /// Ordered key-value entries, excluding tensor declarations.
    pub entries: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn new(magic: &[u8; 8]) -> Self {
        Self {
            magic: *magic,
            entries: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str, path: &Path) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format(path, format!("manifest is missing `{key}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        for (k, v) in &self.entries {
            manifest.push_str(&format!("{k}={v}\n"));
        }
        for (i, (name, t)) in self.tensors.iter().enumerate() {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("tensor.{i}={name}:{}\n", dims.join("x")));
        }
        let payload_len: usize = self.tensors.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(14 + manifest.len() + payload_len);
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], expected_magic: &[u8; 8], path: &Path) -> Result<Self> {
        if bytes.len() < 14 {
            return Err(Error::format(path, "file shorter than the fixed header"));
        }
        if &bytes[..8] != expected_magic {
            return Err(Error::format(
                path,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&bytes[..8]),
                    String::from_utf8_lossy(expected_magic)
                ),
            ));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let mlen = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let manifest = bytes
            .get(14..14 + mlen)
            .ok_or_else(|| Error::format(path, "manifest runs past end of file"))?;
        let manifest = std::str::from_utf8(manifest).map_err(|_| Error::format(path, "manifest is not UTF-8"))?;

        let mut entries = Vec::new();
        let mut decls: Vec<(usize, String, Vec<usize>)> = Vec::new();
        for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("manifest line without `=`: {line:?}")))?;
            if let Some(idx) = k.strip_prefix("tensor.") {
                let idx: usize = idx
                    .parse()
                    .map_err(|_| Error::format(path, format!("bad tensor index in {k:?}")))?;
                let (name, dims) = v
                    .rsplit_once(':')
                    .ok_or_else(|| Error::format(path, format!("bad tensor declaration {v:?}")))?;
                let shape = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| Error::format(path, format!("bad tensor shape {dims:?}")))?;
                decls.push((idx, name.to_string(), shape));
            } else {
                entries.push((k.to_string(), v.to_string()));
            }
        }
        decls.sort_by_key(|d| d.0);
        if decls.iter().enumerate().any(|(i, d)| d.0 != i) {
            return Err(Error::format(path, "tensor indices are not contiguous"));
        }

        let payload = &bytes[14 + mlen..];
        let declared: usize = decls.iter().map(|d| d.2.iter().product::<usize>() * 4).sum();
        if declared != payload.len() {
            return Err(Error::payload(
                path,
                format!(
                    "manifest declares {declared} payload bytes, file holds {}",
                    payload.len()
                ),
            ));
        }
        let mut tensors = Vec::with_capacity(decls.len());
        let mut off = 0;
        for (_, name, shape) in decls {
            let n: usize = shape.iter().product();
            let data = payload[off..off + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += 4 * n;
            let t = Tensor::new(shape, data).map_err(|e| Error::payload(path, format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Self {
            magic: *expected_magic,
            entries,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, expected_magic: &[u8; 8]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected_magic, path)
    }
}

pub(crate) fn parse_value<V: std::str::FromStr>(c: &Container, key: &str, path: &Path) -> Result<V> {
    let raw = c.require(key, path)?;
    raw.parse()
        .map_err(|_| Error::format(path, format!("cannot parse `{key}` value {raw:?}")))
}

pub(crate) fn parse_list(raw: &str) -> Option<Vec<usize>> {
    raw.split(',').map(|s| s.trim().parse().ok()).collect()
}
