//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::perceptual::DEFAULT_CHANNELS;
use crate::ppe::{EncodingMode, ScaleSpec};
use crate::tensor::Precision;
use crate::tokenizer::PatchGrid;
use crate::transformer::Dims;
use crate::upsampler::block_count;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// `None` means `[p, 2p, 4p]`.
    pub scales: Option<Vec<usize>>,
    pub kernels: Vec<usize>,
    pub ppe_channels: usize,
    pub feature_channels: Vec<usize>,
    pub encoding: EncodingMode,
    pub share_encoders: bool,
    pub weights: LossWeights,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub phi_seed: u64,
    pub phi_weights: Option<PathBuf>,
    pub precision: Precision,
    /// Record wall-clock timestamps and inference times in the metrics.
    /// When off, both columns are written as 0 so runs are byte-comparable.
    pub timing: bool,
    pub checkpoint_every: usize,
    /// Publish a stylized sample every this many epochs.
    pub sample_every: usize,
    /// Unrated samples kept for rating before the oldest is evicted.
    pub samples_kept: usize,
    pub content_dir: Option<PathBuf>,
    pub style_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            image_size: 32,
            patch: 8,
            d: 32,
            heads: 4,
            ffn: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            scales: None,
            kernels: vec![1, 3, 5],
            ppe_channels: 8,
            feature_channels: DEFAULT_CHANNELS.to_vec(),
            encoding: EncodingMode::Ppe,
            share_encoders: false,
            weights: LossWeights::default(),
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 10,
            seed: 0,
            phi_seed: 0,
            phi_weights: None,
            precision: Precision::Double,
            timing: true,
            checkpoint_every: 50,
            sample_every: 1,
            samples_kept: 32,
            content_dir: None,
            style_dir: None,
        }
    }
}

pub fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::Double => "f64",
        Precision::Single => "f32",
    }
}

pub fn parse_precision(s: &str) -> Result<Precision> {
    match s {
        "f64" => Ok(Precision::Double),
        "f32" => Ok(Precision::Single),
        _ => Err(Error::Config(format!(
            "unknown precision {s:?} (expected f64 or f32)"
        ))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {v:?} for {key}"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "image_size" => self.image_size = parse_num(key, v)?,
            "patch" => self.patch = parse_num(key, v)?,
            "d" => self.d = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "ffn" => self.ffn = parse_num(key, v)?,
            "encoder_layers" => self.encoder_layers = parse_num(key, v)?,
            "decoder_layers" => self.decoder_layers = parse_num(key, v)?,
            "scales" => {
                self.scales = if v == "auto" {
                    None
                } else {
                    Some(parse_list(key, v)?)
                }
            }
            "kernels" => self.kernels = parse_list(key, v)?,
            "ppe_channels" => self.ppe_channels = parse_num(key, v)?,
            "feature_channels" => self.feature_channels = parse_list(key, v)?,
            "encoding" => self.encoding = v.parse()?,
            "share_encoders" => self.share_encoders = parse_bool(key, v)?,
            "w_content" => self.weights.content = parse_num(key, v)?,
            "w_style" => self.weights.style = parse_num(key, v)?,
            "w_id1" => self.weights.identity_pixel = parse_num(key, v)?,
            "w_id2" => self.weights.identity_feature = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "adam_eps" => self.adam_eps = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "phi_seed" => self.phi_seed = parse_num(key, v)?,
            "phi_weights" => self.phi_weights = opt_path(v),
            "precision" => self.precision = parse_precision(v)?,
            "timing" => self.timing = parse_bool(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "sample_every" => self.sample_every = parse_num(key, v)?,
            "samples_kept" => self.samples_kept = parse_num(key, v)?,
            "content_dir" => self.content_dir = opt_path(v),
            "style_dir" => self.style_dir = opt_path(v),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key = value, got {line:?}",
                    n + 1
                ))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key in a stable order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("image_size", self.image_size.to_string());
        kv("patch", self.patch.to_string());
        kv("d", self.d.to_string());
        kv("heads", self.heads.to_string());
        kv("ffn", self.ffn.to_string());
        kv("encoder_layers", self.encoder_layers.to_string());
        kv("decoder_layers", self.decoder_layers.to_string());
        kv("scales", self.scales.as_deref().map_or("auto".into(), join));
        kv("kernels", join(&self.kernels));
        kv("ppe_channels", self.ppe_channels.to_string());
        kv("feature_channels", join(&self.feature_channels));
        kv("encoding", self.encoding.to_string());
        kv("share_encoders", self.share_encoders.to_string());
        kv("w_content", self.weights.content.to_string());
        kv("w_style", self.weights.style.to_string());
        kv("w_id1", self.weights.identity_pixel.to_string());
        kv("w_id2", self.weights.identity_feature.to_string());
        kv("lr", self.lr.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("phi_seed", self.phi_seed.to_string());
        kv("phi_weights", path(&self.phi_weights));
        kv("precision", precision_name(self.precision).into());
        kv("timing", self.timing.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("sample_every", self.sample_every.to_string());
        kv("samples_kept", self.samples_kept.to_string());
        kv("content_dir", path(&self.content_dir));
        kv("style_dir", path(&self.style_dir));
        s
    }

    pub fn scale_spec(&self) -> ScaleSpec {
        ScaleSpec {
            scales: self
                .scales
                .clone()
                .unwrap_or_else(|| ScaleSpec::standard(self.patch).scales),
            kernels: self.kernels.clone(),
            channels: self.ppe_channels,
        }
    }

    pub fn dims(&self) -> Result<Dims> {
        Dims::new(self.d, self.heads, self.ffn)
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.image_size, self.image_size, self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        block_count(self.patch)?;
        let grid = self.grid()?;
        self.dims()?;
        if self.encoding == EncodingMode::Ppe {
            self.scale_spec().validate(&grid)?;
        }
        if self.feature_channels.is_empty() || self.feature_channels.contains(&0) {
            return Err(Error::Config(format!(
                "invalid feature channel plan {:?}",
                self.feature_channels
            )));
        }
        self.weights.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "step size must be >= 0, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config(format!(
                "adam_eps must be > 0, got {}",
                self.adam_eps
            )));
        }
        for (name, n) in [
            ("epochs", self.epochs),
            ("checkpoint_every", self.checkpoint_every),
            ("sample_every", self.sample_every),
            ("samples_kept", self.samples_kept),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Keys that determine the parameter layout and forward function.
    pub fn architecture_text(&self) -> String {
        const ARCH: [&str; 14] = [
            "image_size",
            "patch",
            "d",
            "heads",
            "ffn",
            "encoder_layers",
            "decoder_layers",
            "scales",
            "kernels",
            "ppe_channels",
            "feature_channels",
            "encoding",
            "share_encoders",
            "phi_seed",
        ];
        self.to_text()
            .lines()
            .filter(|l| ARCH.iter().any(|k| l.split(" = ").next() == Some(k)))
            .map(|l| format!("{l}\n"))
            .collect()
    }
}
