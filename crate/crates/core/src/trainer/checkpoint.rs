//! Checkpoint file: a magic line, one JSON manifest line, then every tensor
//! as little-endian `f64` at the offsets listed in the manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"PYRCKPT1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    /// Base seed of the per-epoch shuffle; the order of epoch `n` is a
    /// function of this seed and `n` alone.
    pub shuffle_seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Training configuration in `key = value` form.
    pub config: String,
    pub epoch: usize,
    pub adam_step: u64,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = self.manifest.clone();
        manifest.tensors.clear();
        let mut offset = 0;
        for (name, t) in &self.tensors {
            manifest.tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.numel();
        }
        let mut out = MAGIC.to_vec();
        out.extend(serde_json::to_vec(&manifest)?);
        out.push(b'\n');
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let parse = |offset: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            offset,
            msg,
        };
        if !bytes.starts_with(MAGIC) {
            return Err(parse(0, "not a checkpoint file".into()));
        }
        let rest = &bytes[MAGIC.len()..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse(MAGIC.len(), "missing manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&rest[..nl])
            .map_err(|e| parse(MAGIC.len(), format!("bad manifest: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported (expected {FORMAT_VERSION})",
                manifest.version
            )));
        }
        let base = MAGIC.len() + nl + 1;
        let payload = &bytes[base..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut expected = 0;
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected {
                return Err(parse(
                    base,
                    format!(
                        "tensor {} has offset {} (expected {expected})",
                        e.name, e.offset
                    ),
                ));
            }
            let end = e.offset + 8 * n;
            let chunk = payload.get(e.offset..end).ok_or_else(|| {
                parse(
                    bytes.len(),
                    format!("truncated payload in tensor {}", e.name),
                )
            })?;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
            expected = end;
        }
        if expected != payload.len() {
            return Err(parse(
                base + expected,
                "trailing bytes after payload".into(),
            ));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
