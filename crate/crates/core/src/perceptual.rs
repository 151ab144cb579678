//! Fixed random-weight convolutional feature extractor and channel statistics.
//!
//! Weight file layout: one JSON manifest line, then every layer's kernel and
//! bias as little-endian `f32`, in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Padding, Tape, Tensor, Var};

pub const STATS_EPS: f64 = 1e-5;
pub const DEFAULT_CHANNELS: [usize; 4] = [8, 16, 32, 64];
const FORMAT: &str = "pyrstyle-features";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    layers: Vec<FeatureLayer>,
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    seed: Option<u64>,
    layers: Vec<LayerEntry>,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    kernel: Vec<usize>,
    bias: Vec<usize>,
}

impl FeatureExtractor {
    /// 3×3 stride-2 layers with the given output channels. Kernel entries
    /// are `N(0, 1)/sqrt(fan_in)` rounded to `f32`; biases are zero.
    pub fn seeded(seed: u64, channels: &[usize]) -> Result<Self> {
        if channels.is_empty() || channels.contains(&0) {
            return Err(Error::Config(format!(
                "invalid feature channel plan {channels:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut layers = Vec::with_capacity(channels.len());
        for &cout in channels {
            let std = 1.0 / ((9 * cin) as f64).sqrt();
            let kernel = Tensor::from_fn(&[3, 3, cin, cout], |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * std) as f32 as f64
            });
            layers.push(FeatureLayer {
                kernel,
                bias: Tensor::zeros(&[cout]),
            });
            cin = cout;
        }
        Ok(FeatureExtractor {
            layers,
            seed: Some(seed),
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[FeatureLayer] {
        &self.layers
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Feature maps `[h_i, w_i, C_i]` of an `[H, W, 3]` image. The weights
    /// are recorded as constants, so only the image receives gradients.
    pub fn features(&self, tape: &mut Tape, img: Var) -> Result<Vec<Var>> {
        let mut x = img;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let k = tape.constant(&layer.kernel);
            let b = tape.constant(&layer.bias);
            let y = tape.conv2d(x, k, 2, Padding::Zero)?;
            let y = tape.add_bias(y, b)?;
            x = tape.relu(y);
            out.push(x);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            seed: self.seed,
            layers: self
                .layers
                .iter()
                .map(|l| LayerEntry {
                    kernel: l.kernel.shape().to_vec(),
                    bias: l.bias.shape().to_vec(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&manifest)?;
        out.push(b'\n');
        for l in &self.layers {
            for &v in l.kernel.data().iter().chain(l.bias.data()) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
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
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse(0, "missing manifest line".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| parse(e.column().saturating_sub(1), format!("bad manifest: {e}")))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(parse(
                0,
                format!(
                    "unsupported weights {} v{}",
                    manifest.format, manifest.version
                ),
            ));
        }
        let mut pos = nl + 1;
        let mut read = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let end = pos + 4 * n;
            let chunk = bytes.get(pos..end).ok_or_else(|| {
                parse(
                    bytes.len(),
                    format!("truncated payload: need {} more bytes", end - bytes.len()),
                )
            })?;
            let data = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            pos = end;
            Tensor::new(shape.to_vec(), data)
        };
        let mut layers = Vec::with_capacity(manifest.layers.len());
        let mut cin = 3;
        for entry in &manifest.layers {
            match entry.kernel[..] {
                [3, 3, c, cout] if c == cin && entry.bias == [cout] => cin = cout,
                _ => {
                    return Err(parse(
                        0,
                        format!(
                            "layer shapes {:?} / {:?} do not chain",
                            entry.kernel, entry.bias
                        ),
                    ))
                }
            }
            let kernel = read(&entry.kernel)?;
            let bias = read(&entry.bias)?;
            layers.push(FeatureLayer { kernel, bias });
        }
        if pos != bytes.len() {
            return Err(parse(pos, format!("{} trailing bytes", bytes.len() - pos)));
        }
        if layers.is_empty() {
            return Err(parse(0, "no layers".into()));
        }
        Ok(FeatureExtractor {
            layers,
            seed: manifest.seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Per-channel `(mean, sqrt(variance + 1e-5))` of a feature map.
pub fn stats(tape: &mut Tape, fmap: Var) -> (Var, Var) {
    (tape.col_mean(fmap), tape.col_std(fmap, STATS_EPS))
}
