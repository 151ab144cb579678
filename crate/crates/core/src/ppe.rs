//! Pyramidal positional encoding.
//!
//! For every token, square context windows of several sizes are cut around
//! the patch center (reflecting at the image border). Each window is encoded
//! by one small convolutional encoder per kernel size (conv → relu → global
//! average pool), and the pooled features of every (scale, kernel) pair are
//! mapped to the model width and summed:
//!
//! ```text
//! PE_i = Σ_s Σ_k  F_i^(s,k) · W^(s,k)
//! ```
//!
//! Sinusoidal and all-zero encodings are provided as ablation baselines.

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::params::{Graph, Init, ParamId, ParamStore};
use crate::tensor::{reflect_index, Padding, Tensor, Var};
use crate::tokenizer::PatchGrid;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingMode {
    #[default]
    Ppe,
    Sinusoidal,
    None,
}

impl FromStr for EncodingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppe" => Ok(EncodingMode::Ppe),
            "sinusoidal" => Ok(EncodingMode::Sinusoidal),
            "none" => Ok(EncodingMode::None),
            other => Err(Error::Config(format!(
                "unknown encoding {other:?} (expected ppe, sinusoidal or none)"
            ))),
        }
    }
}

impl fmt::Display for EncodingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncodingMode::Ppe => "ppe",
            EncodingMode::Sinusoidal => "sinusoidal",
            EncodingMode::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleSpec {
    pub scales: Vec<usize>,
    pub kernels: Vec<usize>,
    pub channels: usize,
}

impl ScaleSpec {
    /// Windows of `p`, `2p` and `4p`; kernels 1, 3 and 5; 8 channels.
    pub fn standard(patch: usize) -> Self {
        ScaleSpec {
            scales: vec![patch, 2 * patch, 4 * patch],
            kernels: vec![1, 3, 5],
            channels: 8,
        }
    }

    pub fn validate(&self, grid: &PatchGrid) -> Result<()> {
        if self.scales.first() != Some(&grid.patch_size()) {
            return Err(Error::Config(format!(
                "smallest scale must equal the patch size {}, got {:?}",
                grid.patch_size(),
                self.scales
            )));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "scales must be strictly increasing, got {:?}",
                self.scales
            )));
        }
        for &s in &self.scales {
            check_window_size(s, grid.height(), grid.width())?;
        }
        if self.kernels.is_empty() || self.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!(
                "kernel sizes must be odd, got {:?}",
                self.kernels
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("encoder channels must be positive".into()));
        }
        Ok(())
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.scales
            .iter()
            .flat_map(|&s| self.kernels.iter().map(move |&k| (s, k)))
    }
}

fn check_window_size(size: usize, height: usize, width: usize) -> Result<()> {
    if size > 3 * height || size > 3 * width {
        return Err(Error::Config(format!(
            "window size {size} exceeds three times the image extent {height}x{width}"
        )));
    }
    Ok(())
}

/// Learnable parameters of one (scale, kernel) encoder.
#[derive(Clone, Debug)]
pub struct EncoderPair {
    pub scale: usize,
    pub kernel_size: usize,
    pub kernel: ParamId,
    pub bias: ParamId,
    pub fusion: ParamId,
}

#[derive(Clone, Debug)]
pub struct PpeParams {
    pub spec: ScaleSpec,
    pub pairs: Vec<EncoderPair>,
}

impl PpeParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, spec: ScaleSpec, d: usize) -> Result<Self> {
        let c = spec.channels;
        let mut pairs = Vec::new();
        for (s, k) in spec.pairs() {
            let prefix = format!("ppe.s{s}.k{k}");
            pairs.push(EncoderPair {
                scale: s,
                kernel_size: k,
                kernel: store.add(
                    format!("{prefix}.kernel"),
                    init.fan_in(&[k, k, 3, c], k * k * 3),
                )?,
                bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[c]))?,
                fusion: store.add(format!("{prefix}.fusion"), init.fan_in(&[c, d], c))?,
            });
        }
        Ok(PpeParams { spec, pairs })
    }
}

/// Flat `[H, W, 3]` indices of the `size × size` window centred on `center`,
/// covering rows `cy − size/2 .. cy + size/2` (half-open), reflected at the
/// borders.
pub fn window_index(
    height: usize,
    width: usize,
    center: (usize, usize),
    size: usize,
) -> Result<Rc<[usize]>> {
    check_window_size(size, height, width)?;
    let half = (size / 2) as isize;
    let (cy, cx) = (center.0 as isize, center.1 as isize);
    let mut idx = Vec::with_capacity(size * size * 3);
    for r in 0..size as isize {
        let y = reflect_index(cy - half + r, height);
        for c in 0..size as isize {
            let x = reflect_index(cx - half + c, width);
            for ch in 0..3 {
                idx.push((y * width + x) * 3 + ch);
            }
        }
    }
    Ok(idx.into())
}

/// Context window of an image, as a standalone image.
pub fn extract_window(img: &Image, center: (usize, usize), size: usize) -> Result<Image> {
    let idx = window_index(img.height(), img.width(), center, size)?;
    Image::new(size, size, idx.iter().map(|&i| img.pixels()[i]).collect())
}

/// conv (zero padding) → bias → relu → global average pool: `[s, s, 3] -> [C]`.
pub fn encode_window(g: &mut Graph, window: Var, kernel: Var, bias: Var) -> Result<Var> {
    let y = g.tape.conv2d(window, kernel, 1, Padding::Zero)?;
    let y = g.tape.add_bias(y, bias)?;
    let y = g.tape.relu(y);
    Ok(g.tape.col_mean(y))
}

/// Weighted-sum fusion. `features` maps `(scale, kernel)` to `[L, C]` (or
/// `[C]` for a single token); the result is `[L, d]` (or `[1, d]`).
pub fn fuse(
    g: &mut Graph,
    features: &BTreeMap<(usize, usize), Var>,
    params: &PpeParams,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for pair in &params.pairs {
        let key = (pair.scale, pair.kernel_size);
        let f = *features.get(&key).ok_or_else(|| {
            Error::Contract(format!(
                "missing feature for scale {} kernel {}",
                key.0, key.1
            ))
        })?;
        let f = match g.tape.shape(f) {
            [c] => {
                let c = *c;
                g.tape.reshape(f, &[1, c])?
            }
            _ => f,
        };
        let w = g.param(pair.fusion);
        let term = g.tape.matmul(f, w)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.tape.add(acc, term)?,
        });
    }
    total.ok_or_else(|| Error::Contract("no encoder pairs to fuse".into()))
}

/// Interleaved sin/cos table `[L, d]` over flattened token index with
/// frequencies `1 / 10000^(2i/d)`.
pub fn sinusoidal_table(tokens: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[tokens, d], |n| {
        let (pos, j) = ((n / d) as f64, n % d);
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

/// Per-token positional encodings `[L, d]` of an image tensor `[H, W, 3]`.
pub fn encode_positions(
    g: &mut Graph,
    pixels: Var,
    grid: &PatchGrid,
    mode: EncodingMode,
    params: Option<&PpeParams>,
    d: usize,
) -> Result<Var> {
    let l = grid.token_count();
    match mode {
        EncodingMode::None => Ok(g.tape.constant(&Tensor::zeros(&[l, d]))),
        EncodingMode::Sinusoidal => Ok(g.tape.constant(&sinusoidal_table(l, d))),
        EncodingMode::Ppe => {
            let params = params
                .ok_or_else(|| Error::Contract("ppe encoding requires ppe parameters".into()))?;
            let (h, w) = (grid.height(), grid.width());
            let mut per_pair: BTreeMap<(usize, usize), Vec<Var>> = BTreeMap::new();
            for t in 0..l {
                let center = grid.center(t);
                for &s in &params.spec.scales {
                    let idx = window_index(h, w, center, s)?;
                    let window = g.tape.gather(pixels, idx, &[s, s, 3])?;
                    for pair in params.pairs.iter().filter(|p| p.scale == s) {
                        let kernel = g.param(pair.kernel);
                        let bias = g.param(pair.bias);
                        let f = encode_window(g, window, kernel, bias)?;
                        per_pair.entry((s, pair.kernel_size)).or_default().push(f);
                    }
                }
            }
            let mut features = BTreeMap::new();
            for (key, rows) in per_pair {
                features.insert(key, g.tape.stack(&rows)?);
            }
            fuse(g, &features, params)
        }
    }
}
