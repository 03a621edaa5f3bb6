//! HTTP job service over the anonymization engine.
//!
//! | Method | Path | |
//! |---|---|---|
//! | POST | `/api/images` | upload a PNG, returns `image_id` |
//! | GET | `/api/images/{id}/segmentation` | label map from the parser plugin |
//! | POST | `/api/invert` | start (or join) an inversion job |
//! | POST | `/api/anonymize` | start an anonymization job against an inversion |
//! | GET | `/api/jobs/{id}` | job state, config echo and result summary |
//! | GET | `/api/jobs/{id}/result` | result bytes of a finished job |
//!
//! Every response carries `X-NullFace-API: 1`.

mod handlers;
mod state;

use std::path::PathBuf;

use axum::http::HeaderValue;
use axum::routing::{get, post};
use axum::Router;
use nullface_core::{Error, Result};

pub use handlers::{AnonymizeRequest, InvertRequest, MaskSpec};
pub use state::{AppState, Job, JobKind, JobResult, JobState};

pub const API_VERSION_HEADER: &str = "x-nullface-api";
pub const API_VERSION: &str = "1";
pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 8 * 1024 * 1024;
/// Largest accepted step count for invert requests.
pub const MAX_STEPS: usize = 1000;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Uploads, inversion records and results live under this directory.
    pub run_dir: PathBuf,
    pub max_upload_bytes: usize,
    pub plugin_path: Option<String>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/images", post(handlers::upload_image))
        .route("/api/images/{id}/segmentation", get(handlers::segmentation))
        .route("/api/invert", post(handlers::invert))
        .route("/api/anonymize", post(handlers::anonymize))
        .route("/api/jobs/{id}", get(handlers::job))
        .route("/api/jobs/{id}/result", get(handlers::job_result))
        .layer(axum::middleware::map_response(
            |mut res: axum::response::Response| async move {
                res.headers_mut()
                    .insert(API_VERSION_HEADER, HeaderValue::from_static(API_VERSION));
                res
            },
        ))
        .with_state(state)
}

/// Binds `addr` and serves until the process is interrupted.
pub async fn serve(addr: &str, config: ServiceConfig) -> Result<()> {
    let state = AppState::new(config)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(addr, e))?;
    log::info!("listening on {addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(addr, e))
}
