use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Multipart, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use pyrstyle::imageio::{decode, encode_png, resize_bilinear};
use pyrstyle::losses::RatingFeedback;
use pyrstyle::trainer::{unix_seconds, MetricsRow};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::session::{RateOutcome, Session};

pub const API_VERSION: u32 = 1;
pub const INFERENCE_HEADER: &str = "x-inference-seconds";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingState {
    Idle,
    Training,
    Stopped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatusReport {
    pub v: u32,
    pub state: TrainingState,
    pub epoch: usize,
    pub latest: Option<MetricsRow>,
    /// Current `softplus(gamma.raw)`; null until a model exists.
    pub gamma: Option<f64>,
    pub pending_ratings: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodedImage {
    pub format: String,
    pub width: usize,
    pub height: usize,
    /// Base64 of the encoded file.
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub sample_id: String,
    pub epoch: usize,
    pub step: u64,
    pub content_ref: String,
    pub style_ref: String,
    pub image: EncodedImage,
    pub created_at: u64,
    pub rated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleList {
    pub v: u32,
    pub samples: Vec<SampleRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRequest {
    pub sample_id: String,
    pub rating: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppliedRating {
    pub sample_id: String,
    pub rating: u8,
}

/// Full-precision losses of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSummary {
    pub step: u64,
    pub epoch: usize,
    pub l_c: f64,
    pub l_s: f64,
    pub l_id1: f64,
    pub l_id2: f64,
    pub l_total: f64,
    pub l_new: f64,
    /// γ in effect for this step.
    pub gamma: f64,
    pub rating: Option<AppliedRating>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsHistory {
    pub v: u32,
    pub epochs: Vec<MetricsRow>,
    pub steps: Vec<StepSummary>,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": msg.into() }))).into_response()
}

pub(crate) async fn status(State(s): State<Arc<Session>>) -> Json<StatusReport> {
    Json(s.status())
}

pub(crate) async fn samples(State(s): State<Arc<Session>>) -> Json<SampleList> {
    Json(SampleList {
        v: API_VERSION,
        samples: s.unrated_samples(),
    })
}

pub(crate) async fn metrics(State(s): State<Arc<Session>>) -> Json<MetricsHistory> {
    let (epochs, steps) = s.history();
    Json(MetricsHistory {
        v: API_VERSION,
        epochs,
        steps,
    })
}

fn parse_rate(body: &[u8]) -> Result<RatingFeedback, String> {
    let v: Value = serde_json::from_slice(body).map_err(|e| format!("invalid JSON: {e}"))?;
    let sample_id = match v.get("sample_id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err("sample_id must be a string".into()),
    };
    let rating = v
        .get("rating")
        .and_then(Value::as_i64)
        .ok_or("rating must be an integer in 1..=5")?;
    RatingFeedback::new(sample_id, rating, unix_seconds()).map_err(|e| e.to_string())
}

pub(crate) async fn rate(State(s): State<Arc<Session>>, body: Bytes) -> Response {
    let rating = match parse_rate(&body) {
        Ok(r) => r,
        Err(msg) => return error(StatusCode::BAD_REQUEST, msg),
    };
    let id = rating.sample_id.clone();
    match s.rate(rating) {
        RateOutcome::Accepted => StatusCode::NO_CONTENT.into_response(),
        RateOutcome::Unknown => error(StatusCode::NOT_FOUND, format!("unknown sample {id}")),
        RateOutcome::AlreadyRated => error(
            StatusCode::CONFLICT,
            format!("sample {id} is already rated"),
        ),
        RateOutcome::QueueFull => error(StatusCode::SERVICE_UNAVAILABLE, "rating queue is full"),
    }
}

pub(crate) async fn stylize(State(s): State<Arc<Session>>, mut form: Multipart) -> Response {
    let Some(model) = s.model() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no model is available yet");
    };
    let (mut content, mut style) = (None, None);
    loop {
        match form.next_field().await {
            Ok(Some(field)) => {
                let name = field.name().unwrap_or_default().to_string();
                let bytes = match field.bytes().await {
                    Ok(b) => b,
                    Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
                };
                match name.as_str() {
                    "content" => content = Some(bytes),
                    "style" => style = Some(bytes),
                    _ => {}
                }
            }
            Ok(None) => break,
            Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
        }
    }
    let (Some(content), Some(style)) = (content, style) else {
        return error(
            StatusCode::BAD_REQUEST,
            "multipart fields content and style are required",
        );
    };
    let job = tokio::task::spawn_blocking(move || {
        let size = model.grid.height();
        let c = decode(&content, Path::new("content"))
            .map_err(|e| (StatusCode::BAD_REQUEST, e.to_string()))?;
        let st = decode(&style, Path::new("style"))
            .map_err(|e| (StatusCode::BAD_REQUEST, e.to_string()))?;
        let c = resize_bilinear(&c, size, size);
        let st = resize_bilinear(&st, size, size);
        let t = Instant::now();
        let out = model
            .stylize(&c, &st)
            .map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        let seconds = t.elapsed().as_secs_f64();
        let png =
            encode_png(&out).map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        Ok::<_, (StatusCode, String)>((png, seconds))
    });
    match job.await {
        Ok(Ok((png, seconds))) => (
            StatusCode::OK,
            [
                (header::CONTENT_TYPE, "image/png".to_string()),
                (
                    header::HeaderName::from_static(INFERENCE_HEADER),
                    format!("{seconds}"),
                ),
            ],
            png,
        )
            .into_response(),
        Ok(Err((code, msg))) => error(code, msg),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}
