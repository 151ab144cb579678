//! The full stylization network and its training objective.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::losses::{
    feature_distance, rl_augmented_loss, softplus, statistics_distance, total_loss, LossReport,
    LossTerms, LossWeights, RatingFeedback,
};
use crate::params::{Graph, Init, ParamId, ParamStore};
use crate::perceptual::FeatureExtractor;
use crate::ppe::{encode_positions, EncodingMode, PpeParams};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{embed, PatchGrid, PatchProjection};
use crate::transformer::{Decoder, Dims, Encoder};
use crate::upsampler::Upsampler;

pub const GAMMA_NAME: &str = "gamma.raw";

#[derive(Clone, Debug)]
pub struct StyleModel {
    pub store: ParamStore,
    pub grid: PatchGrid,
    pub dims: Dims,
    pub encoding: EncodingMode,
    pub patch: PatchProjection,
    pub ppe: Option<PpeParams>,
    pub content_encoder: Encoder,
    /// `None` when both streams share `content_encoder`.
    pub style_encoder: Option<Encoder>,
    pub decoder: Decoder,
    pub upsampler: Upsampler,
    pub gamma_raw: ParamId,
    pub phi: FeatureExtractor,
    pub weights: LossWeights,
}

/// Tape nodes of one evaluation of the objective.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub output: Var,
    pub terms: LossTerms,
    pub total: Var,
    pub augmented: Var,
}

impl Objective {
    pub fn report(&self, tape: &Tape) -> Result<LossReport> {
        Ok(LossReport {
            l_c: tape.item(self.terms.content)?,
            l_s: tape.item(self.terms.style)?,
            l_id1: tape.item(self.terms.identity_pixel)?,
            l_id2: tape.item(self.terms.identity_feature)?,
            l_total: tape.item(self.total)?,
            l_new: tape.item(self.augmented)?,
        })
    }
}

impl StyleModel {
    /// Build with freshly initialised parameters. The feature extractor is
    /// loaded from `config.phi_weights` when set, else generated from
    /// `config.phi_seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let phi = match &config.phi_weights {
            Some(path) => FeatureExtractor::load(path)?,
            None => FeatureExtractor::seeded(config.phi_seed, &config.feature_channels)?,
        };
        Self::with_extractor(config, phi)
    }

    pub fn with_extractor(config: &TrainConfig, phi: FeatureExtractor) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        let dims = config.dims()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(config.seed);
        let patch = PatchProjection::new(&mut store, &mut init, config.patch, dims.d)?;
        let ppe = match config.encoding {
            EncodingMode::Ppe => Some(PpeParams::new(
                &mut store,
                &mut init,
                config.scale_spec(),
                dims.d,
            )?),
            _ => None,
        };
        let (content_encoder, style_encoder) = if config.share_encoders {
            let enc = Encoder::new(&mut store, &mut init, "enc", dims, config.encoder_layers)?;
            (enc, None)
        } else {
            let c = Encoder::new(
                &mut store,
                &mut init,
                "enc.content",
                dims,
                config.encoder_layers,
            )?;
            let s = Encoder::new(
                &mut store,
                &mut init,
                "enc.style",
                dims,
                config.encoder_layers,
            )?;
            (c, Some(s))
        };
        let decoder = Decoder::new(&mut store, &mut init, "dec", dims, config.decoder_layers)?;
        let upsampler = Upsampler::new(&mut store, &mut init, config.patch, dims.d)?;
        let gamma_raw = store.add(GAMMA_NAME, Tensor::scalar(0.0))?;
        Ok(StyleModel {
            store,
            grid,
            dims,
            encoding: config.encoding,
            patch,
            ppe,
            content_encoder,
            style_encoder,
            decoder,
            upsampler,
            gamma_raw,
            phi,
            weights: config.weights,
        })
    }

    pub fn gamma(&self) -> f64 {
        softplus(self.store.get(self.gamma_raw).data()[0])
    }

    pub fn check_image(&self, img: &Image, what: &str) -> Result<()> {
        self.grid
            .check_image(img)
            .map_err(|e| Error::Data(format!("{what}: {e}")))
    }

    /// Stylized `[H, W, 3]` image of `content` rendered in `style`. Both are
    /// `[H, W, 3]` tape nodes.
    pub fn forward(&self, g: &mut Graph, content: Var, style: Var) -> Result<Var> {
        let e_c = embed(g, content, &self.grid, &self.patch)?;
        let pe = encode_positions(
            g,
            content,
            &self.grid,
            self.encoding,
            self.ppe.as_ref(),
            self.dims.d,
        )?;
        let z_c = g.tape.add(e_c, pe)?;
        let y_c = self.content_encoder.forward(g, z_c)?;
        let e_s = embed(g, style, &self.grid, &self.patch)?;
        let y_s = self
            .style_encoder
            .as_ref()
            .unwrap_or(&self.content_encoder)
            .forward(g, e_s)?;
        let x = self.decoder.forward(g, y_c, y_s)?;
        self.upsampler.forward(g, x, &self.grid)
    }

    /// Three forward passes (stylized, content identity, style identity),
    /// the four loss terms, their weighted total and the rating-augmented
    /// objective.
    pub fn objective(
        &self,
        g: &mut Graph,
        content: &Tensor,
        style: &Tensor,
        rating: Option<&RatingFeedback>,
    ) -> Result<Objective> {
        let c = g.tape.constant(content);
        let s = g.tape.constant(style);
        let out = self.forward(g, c, s)?;
        let cc = self.forward(g, c, c)?;
        let ss = self.forward(g, s, s)?;

        let tape = &mut *g.tape;
        let f_c = self.phi.features(tape, c)?;
        let f_s = self.phi.features(tape, s)?;
        let f_out = self.phi.features(tape, out)?;
        let f_cc = self.phi.features(tape, cc)?;
        let f_ss = self.phi.features(tape, ss)?;

        let content_term = feature_distance(tape, &f_out, &f_c)?;
        let style_term = statistics_distance(tape, &f_out, &f_s)?;
        let a = tape.mse(cc, c)?;
        let b = tape.mse(ss, s)?;
        let identity_pixel = tape.add(a, b)?;
        let a = feature_distance(tape, &f_cc, &f_c)?;
        let b = feature_distance(tape, &f_ss, &f_s)?;
        let identity_feature = tape.add(a, b)?;
        let terms = LossTerms {
            content: content_term,
            style: style_term,
            identity_pixel,
            identity_feature,
        };
        let total = total_loss(tape, &terms, &self.weights)?;
        let augmented = rl_augmented_loss(tape, total, rating, g.vars[self.gamma_raw])?;
        Ok(Objective {
            output: out,
            terms,
            total,
            augmented,
        })
    }

    /// Unrated loss report for one pair, without touching parameters.
    pub fn evaluate(&self, content: &Image, style: &Image) -> Result<LossReport> {
        self.check_image(content, "content")?;
        self.check_image(style, "style")?;
        let mut tape = Tape::new();
        let vars = self.store.bind_frozen(&mut tape);
        let mut g = Graph::new(&mut tape, &vars);
        let obj = self.objective(&mut g, &content.to_tensor(), &style.to_tensor(), None)?;
        obj.report(&tape)
    }

    /// Inference-only stylization.
    pub fn stylize(&self, content: &Image, style: &Image) -> Result<Image> {
        self.check_image(content, "content")?;
        self.check_image(style, "style")?;
        let mut tape = Tape::new();
        let vars = self.store.bind_frozen(&mut tape);
        let mut g = Graph::new(&mut tape, &vars);
        let c = g.tape.constant(&content.to_tensor());
        let s = g.tape.constant(&style.to_tensor());
        let out = self.forward(&mut g, c, s)?;
        Image::from_tensor(&tape.tensor(out))
    }
}
