//! HTTP facade over a live training session.
//!
//! Handlers never touch model tensors. They talk to the training thread
//! through a bounded rating queue (in), a bounded sample queue (out), and
//! snapshots the trainer swaps in at step and epoch boundaries.

mod api;
mod session;

pub use api::{
    AppliedRating, EncodedImage, MetricsHistory, RateRequest, SampleList, SampleRecord,
    StatusReport, StepSummary, TrainingState, API_VERSION,
};
pub use session::{spawn_training, ServiceObserver, Session};

use std::future::Future;
use std::sync::Arc;

use axum::routing::{get, post};
use axum::Router;
use tower_http::cors::CorsLayer;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

pub fn router(session: Arc<Session>) -> Router {
    Router::new()
        .route("/api/status", get(api::status))
        .route("/api/samples", get(api::samples))
        .route("/api/rate", post(api::rate))
        .route("/api/stylize", post(api::stylize))
        .route("/api/metrics", get(api::metrics))
        .layer(CorsLayer::permissive())
        .with_state(session)
}

/// Serve until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    session: Arc<Session>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(session))
        .with_graceful_shutdown(shutdown)
        .await
}
