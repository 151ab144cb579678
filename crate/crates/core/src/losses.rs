//! Content, style and identity losses, their weighted total, and the
//! rating-augmented objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perceptual::{stats, FeatureExtractor};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub content: f64,
    pub style: f64,
    pub identity_pixel: f64,
    pub identity_feature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            content: 10.0,
            style: 7.0,
            identity_pixel: 50.0,
            identity_feature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.content,
            self.style,
            self.identity_pixel,
            self.identity_feature,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got {all:?}"
            )));
        }
        Ok(())
    }
}

/// Scalar loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: f64,
    pub l_s: f64,
    pub l_id1: f64,
    pub l_id2: f64,
    pub l_total: f64,
    pub l_new: f64,
}

/// A human rating of one published sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingFeedback {
    pub sample_id: String,
    pub rating: u8,
    pub received_at: u64,
}

impl RatingFeedback {
    pub fn new(sample_id: impl Into<String>, rating: i64, received_at: u64) -> Result<Self> {
        if !(1..=5).contains(&rating) {
            return Err(Error::Validation(format!(
                "rating must be an integer in 1..=5, got {rating}"
            )));
        }
        Ok(RatingFeedback {
            sample_id: sample_id.into(),
            rating: rating as u8,
            received_at,
        })
    }

    /// `(5 - rating) / 4`: 0 for a perfect rating, 1 for the worst.
    pub fn penalty(&self) -> f64 {
        penalty(self.rating)
    }
}

pub fn penalty(rating: u8) -> f64 {
    (5.0 - rating as f64) / 4.0
}

/// `ln(1 + e^raw)`, computed stably.
pub fn softplus(raw: f64) -> f64 {
    raw.max(0.0) + (-raw.abs()).exp().ln_1p()
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::Contract("no terms to average".into()))?;
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

fn check_layers(a: &[Var], b: &[Var]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "{} feature layers against {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Layer-averaged feature MSE between two precomputed feature stacks.
pub fn feature_distance(tape: &mut Tape, a: &[Var], b: &[Var]) -> Result<Var> {
    check_layers(a, b)?;
    let terms = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| tape.mse(x, y))
        .collect::<Result<Vec<_>>>()?;
    mean_of(tape, &terms)
}

/// Layer-averaged MSE of channel means plus MSE of channel stds.
pub fn statistics_distance(tape: &mut Tape, a: &[Var], b: &[Var]) -> Result<Var> {
    check_layers(a, b)?;
    let mut terms = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        let (mx, sx) = stats(tape, x);
        let (my, sy) = stats(tape, y);
        let dm = tape.mse(mx, my)?;
        let ds = tape.mse(sx, sy)?;
        terms.push(tape.add(dm, ds)?);
    }
    mean_of(tape, &terms)
}

pub fn content_loss(
    tape: &mut Tape,
    phi: &FeatureExtractor,
    output: Var,
    content: Var,
) -> Result<Var> {
    let fo = phi.features(tape, output)?;
    let fc = phi.features(tape, content)?;
    feature_distance(tape, &fo, &fc)
}

pub fn style_loss(tape: &mut Tape, phi: &FeatureExtractor, output: Var, style: Var) -> Result<Var> {
    let fo = phi.features(tape, output)?;
    let fs = phi.features(tape, style)?;
    statistics_distance(tape, &fo, &fs)
}

/// `(pixel, feature)` identity losses of the reconstructions `cc ≈ content`
/// and `ss ≈ style`.
pub fn identity_losses(
    tape: &mut Tape,
    phi: &FeatureExtractor,
    cc: Var,
    content: Var,
    ss: Var,
    style: Var,
) -> Result<(Var, Var)> {
    let a = tape.mse(cc, content)?;
    let b = tape.mse(ss, style)?;
    let pixel = tape.add(a, b)?;
    let f_cc = phi.features(tape, cc)?;
    let f_c = phi.features(tape, content)?;
    let f_ss = phi.features(tape, ss)?;
    let f_s = phi.features(tape, style)?;
    let a = feature_distance(tape, &f_cc, &f_c)?;
    let b = feature_distance(tape, &f_ss, &f_s)?;
    let feature = tape.add(a, b)?;
    Ok((pixel, feature))
}

/// The four loss terms as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub content: Var,
    pub style: Var,
    pub identity_pixel: Var,
    pub identity_feature: Var,
}

impl LossTerms {
    fn named(&self) -> [(&'static str, Var); 4] {
        [
            ("l_c", self.content),
            ("l_s", self.style),
            ("l_id1", self.identity_pixel),
            ("l_id2", self.identity_feature),
        ]
    }
}

/// Weighted sum of the four terms. A non-finite term is reported by name.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    for (name, v) in terms.named() {
        if !tape.item(v)?.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let weights = [w.content, w.style, w.identity_pixel, w.identity_feature];
    let mut acc: Option<Var> = None;
    for ((_, v), wt) in terms.named().into_iter().zip(weights) {
        let term = tape.scale(v, wt);
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("four terms"))
}

/// `total + softplus(gamma_raw) · penalty(rating)`, or `total` unchanged when
/// no rating applies to this step.
pub fn rl_augmented_loss(
    tape: &mut Tape,
    total: Var,
    rating: Option<&RatingFeedback>,
    gamma_raw: Var,
) -> Result<Var> {
    match rating {
        None => Ok(total),
        Some(r) => {
            let gamma = tape.softplus(gamma_raw);
            let term = tape.scale(gamma, r.penalty());
            tape.add(total, term)
        }
    }
}
