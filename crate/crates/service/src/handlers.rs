//! Request handlers and job tasks.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use base64::Engine as _;
use nullface_core::denoiser::AnonymizationConfig;
use nullface_core::inversion::InversionRecord;
use nullface_core::masks::{decode_mask_png, encode_mask_png, MaskPreset, Region};
use nullface_core::runs::{AnonymizeRun, InvertRun, RunManifest};
use nullface_core::toyset::decode_rgb;
use nullface_core::{Error, ErrorClass};
use serde::Deserialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::state::{inversion_id, AppState, InversionEntry, JobKind, JobResult, JobState, StoredImage};
use crate::MAX_STEPS;

const DEFAULT_BACKEND: &str = "toy-pointwise";

pub(crate) struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} `{id}`"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match (&e, e.class()) {
            (Error::FingerprintMismatch { .. }, _) => StatusCode::CONFLICT,
            (Error::Io { .. }, _) => StatusCode::INTERNAL_SERVER_ERROR,
            (_, ErrorClass::Usage | ErrorClass::Plugin | ErrorClass::Data) => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "status": self.status.as_u16(), "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> nullface_core::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker panicked: {e}")))?
        .map_err(ApiError::from)
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) async fn upload_image(State(state): State<AppState>, headers: HeaderMap, body: Body) -> ApiResult<Response> {
    if let Some(ct) = headers.get(header::CONTENT_TYPE) {
        let ct = ct.to_str().unwrap_or("");
        if !ct.starts_with("image/png") && !ct.starts_with("application/octet-stream") {
            return Err(ApiError::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                format!("expected image/png, got `{ct}`"),
            ));
        }
    }
    let cap = state.config().max_upload_bytes;
    let bytes = axum::body::to_bytes(body, cap).await.map_err(|_| {
        ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("upload exceeds the {cap}-byte limit"),
        )
    })?;
    let image = decode_rgb(&bytes)
        .map_err(|e| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, format!("cannot decode image: {e}")))?;
    let id = format!("img-{}", uuid::Uuid::new_v4().simple());
    let path = state.config().run_dir.join("images").join(format!("{id}.png"));
    let (w, h) = image.dimensions();
    let image = Arc::new(image);
    let (img, p) = (image.clone(), path.clone());
    blocking(move || nullface_core::runs::save_png(&img, &p)).await?;
    state.add_image(id.clone(), StoredImage { path, image });
    Ok((StatusCode::CREATED, Json(json!({ "image_id": id, "width": w, "height": h }))).into_response())
}

pub(crate) async fn segmentation(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let stored = state.image(&id).ok_or_else(|| ApiError::not_found("image", &id))?;
    let seg = match state.cached_segmentation(&id) {
        Some(s) => s,
        None => {
            let st = state.clone();
            let img = stored.image.clone();
            let seg = blocking(move || st.stack(DEFAULT_BACKEND, img.width(), img.height())?.segment(&img)).await?;
            let seg = Arc::new(seg);
            state.store_segmentation(&id, seg.clone());
            seg
        }
    };
    let regions: Vec<_> = Region::ALL
        .iter()
        .map(|r| json!({ "code": r.code(), "name": r.name() }))
        .collect();
    Ok(Json(json!({
        "image_id": id,
        "width": seg.width(),
        "height": seg.height(),
        "labels": seg.labels(),
        "regions": regions,
    })))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertRequest {
    pub image_id: String,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_backend")]
    pub backend: String,
}

fn default_steps() -> usize {
    100
}

fn default_backend() -> String {
    DEFAULT_BACKEND.into()
}

/// Fills the inversion cache entry once; concurrent callers wait for the same result.
async fn ensure_record(state: &AppState, entry: &Arc<InversionEntry>) -> std::result::Result<Arc<InversionRecord>, String> {
    entry
        .record
        .get_or_init(|| {
            let state = state.clone();
            let entry = entry.clone();
            async move {
                let stored = state
                    .image(&entry.image_id)
                    .ok_or_else(|| format!("image `{}` vanished", entry.image_id))?;
                let st = state.clone();
                let en = entry.clone();
                let res = blocking(move || {
                    let stack = st.stack(&en.backend, stored.image.width(), stored.image.height())?;
                    let run = InvertRun {
                        image: stored.path.clone(),
                        steps: en.steps,
                        seed: en.seed,
                        lean: false,
                        plugins: st.stack_spec(&en.backend),
                        out: en.dir(&st),
                    };
                    let (rec, _) = run.run_with(&stored.image, &stack)?;
                    st.note_inversion();
                    Ok(Arc::new(rec))
                })
                .await;
                res.map_err(|e| e.message)
            }
        })
        .await
        .clone()
}

pub(crate) async fn invert(State(state): State<AppState>, Json(req): Json<InvertRequest>) -> ApiResult<Response> {
    if req.steps == 0 || req.steps > MAX_STEPS {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("steps must be in 1..={MAX_STEPS}, got {}", req.steps),
        ));
    }
    let stored = state.image(&req.image_id).ok_or_else(|| ApiError::not_found("image", &req.image_id))?;
    {
        let st = state.clone();
        let backend = req.backend.clone();
        let img = stored.image.clone();
        blocking(move || st.stack(&backend, img.width(), img.height()).map(|_| ())).await?;
    }
    let id = inversion_id(&req.image_id, req.steps, req.seed, &req.backend);
    let config = json!({
        "image_id": req.image_id,
        "steps": req.steps,
        "seed": req.seed,
        "backend": req.backend,
        "inversion_id": id,
    });
    let (entry, created) = state.inversion_entry(&id, || InversionEntry {
        id: id.clone(),
        image_id: req.image_id.clone(),
        steps: req.steps,
        seed: req.seed,
        backend: req.backend.clone(),
        job_id: state.new_job(JobKind::Invert, config).id,
        record: Default::default(),
    });
    if created {
        let state = state.clone();
        let entry = entry.clone();
        tokio::spawn(async move {
            let _slot = state.slot().await;
            state.transition(&entry.job_id, JobState::Running, None);
            let outcome = match ensure_record(&state, &entry).await {
                Ok(_) => {
                    let manifest_path = RunManifest::path_for(&entry.dir(&state));
                    RunManifest::load(&manifest_path)
                        .map(|manifest| {
                            let result = JobResult {
                                inversion_id: entry.id.clone(),
                                result_url: format!("/api/jobs/{}/result", entry.job_id),
                                identity_distance: None,
                                manifest,
                                cached: false,
                            };
                            (result, manifest_path)
                        })
                        .map_err(|e| e.to_string())
                }
                Err(e) => Err(e),
            };
            let to = if outcome.is_ok() { JobState::Done } else { JobState::Failed };
            state.transition(&entry.job_id, to, Some(outcome));
        });
    }
    let job = state.job(&entry.job_id).expect("job registered with its entry");
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

/// A preset name, or a mask PNG (base64) at latent or image resolution.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MaskSpec {
    Preset(String),
    Inline { png_base64: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnonymizeRequest {
    pub inversion_id: String,
    pub lambda_id: Option<f64>,
    pub lambda_cfg: Option<f64>,
    pub lambda_img: Option<f32>,
    pub t_skip: Option<usize>,
    pub mask_start: Option<usize>,
    pub mask: Option<MaskSpec>,
    /// Must match the inversion's backend when given.
    pub backend: Option<String>,
}

fn unprocessable(msg: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, msg)
}

pub(crate) async fn anonymize(State(state): State<AppState>, Json(req): Json<AnonymizeRequest>) -> ApiResult<Response> {
    let entry = state
        .find_inversion(&req.inversion_id)
        .ok_or_else(|| ApiError::not_found("inversion", &req.inversion_id))?;
    if let Some(b) = &req.backend {
        if *b != entry.backend {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("inversion `{}` was made with backend `{}`, not `{b}`", entry.id, entry.backend),
            ));
        }
    }
    let d = AnonymizationConfig::default();
    let preset = match &req.mask {
        Some(MaskSpec::Preset(name)) => name.parse::<MaskPreset>().map_err(|e| unprocessable(e.to_string()))?,
        _ => d.mask_preset,
    };
    let cfg = AnonymizationConfig {
        steps: entry.steps,
        t_skip: req.t_skip.unwrap_or(d.t_skip.min(entry.steps)),
        lambda_id: req.lambda_id.unwrap_or(d.lambda_id),
        lambda_cfg: req.lambda_cfg.unwrap_or(d.lambda_cfg),
        lambda_img: req.lambda_img.unwrap_or(d.lambda_img),
        mask_preset: preset,
        mask_start: req.mask_start.unwrap_or(d.mask_start.min(entry.steps)),
        seed: entry.seed,
    };
    cfg.validate().map_err(|e| unprocessable(e.to_string()))?;
    let stored = state.image(&entry.image_id).ok_or_else(|| ApiError::not_found("image", &entry.image_id))?;

    let mask_path = match &req.mask {
        Some(MaskSpec::Inline { png_base64 }) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(png_base64)
                .map_err(|e| unprocessable(format!("mask is not valid base64: {e}")))?;
            let st = state.clone();
            let en = entry.clone();
            let img = stored.image.clone();
            Some(
                blocking(move || {
                    let stack = st.stack(&en.backend, img.width(), img.height())?;
                    let shape = stack.codec.latent_shape_for(img.width(), img.height())?;
                    let mask = decode_mask_png(&bytes, None)?;
                    let mask = match (mask.width(), mask.height()) {
                        (w, h) if (w, h) == (shape.width, shape.height) => mask,
                        (w, h) if (w as u32, h as u32) == img.dimensions() => mask.downsample_to(shape.width, shape.height)?,
                        (w, h) => {
                            return Err(Error::ShapeMismatch {
                                expected: format!("{}x{} or {}x{} mask", shape.width, shape.height, img.width(), img.height()),
                                found: format!("{w}x{h}"),
                            })
                        }
                    };
                    let png = encode_mask_png(&mask)?;
                    let path = st.config().run_dir.join("masks").join(format!("{}.png", sha_hex(&png)));
                    std::fs::write(&path, &png).map_err(|e| Error::io(&path, e))?;
                    Ok(path)
                })
                .await?,
            )
        }
        _ => None,
    };

    let key = json!({
        "inversion_id": entry.id,
        "config": cfg,
        "mask": mask_path.as_ref().map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned())),
    });
    let result_dir = state
        .config()
        .run_dir
        .join("results")
        .join(&sha_hex(key.to_string().as_bytes())[..24]);
    let config = json!({
        "inversion_id": entry.id,
        "lambda_id": cfg.lambda_id,
        "lambda_cfg": cfg.lambda_cfg,
        "lambda_img": cfg.lambda_img,
        "t_skip": cfg.t_skip,
        "mask_start": cfg.mask_start,
        "mask": match &mask_path {
            Some(_) => json!("inline"),
            None => json!(cfg.mask_preset.name()),
        },
        "steps": cfg.steps,
        "seed": cfg.seed,
        "backend": entry.backend,
    });
    let job = state.new_job(JobKind::Anonymize, config);
    let run = AnonymizeRun {
        record: entry.dir(&state),
        image: stored.path.clone(),
        config: cfg,
        mask: mask_path,
        embedding_image: None,
        trace: None,
        plugins: state.stack_spec(&entry.backend),
        out: result_dir.join("anonymized.png"),
    };
    let job_id = job.id.clone();
    let st = state.clone();
    tokio::spawn(async move {
        let _slot = st.slot().await;
        st.transition(&job_id, JobState::Running, None);
        let outcome = match ensure_record(&st, &entry).await {
            Ok(rec) => {
                let st2 = st.clone();
                let url = format!("/api/jobs/{job_id}/result");
                blocking(move || run_anonymize(&st2, &entry, rec, &stored, run, url))
                    .await
                    .map_err(|e| e.message)
            }
            Err(e) => Err(format!("inversion failed: {e}")),
        };
        let to = if outcome.is_ok() { JobState::Done } else { JobState::Failed };
        st.transition(&job_id, to, Some(outcome));
    });
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

fn run_anonymize(
    state: &AppState,
    entry: &InversionEntry,
    rec: Arc<InversionRecord>,
    stored: &StoredImage,
    run: AnonymizeRun,
    result_url: String,
) -> nullface_core::Result<(JobResult, PathBuf)> {
    let manifest_path = RunManifest::path_for(&run.out);
    let (manifest, cached) = match RunManifest::load(&manifest_path) {
        Ok(m) if run.out.exists() => (m, true),
        _ => {
            let stack = state.stack(&entry.backend, stored.image.width(), stored.image.height())?;
            let (img, distance) = run.run_with(&rec, &stored.image, &stack)?;
            (run.write_outputs(&img, distance, &stack)?, false)
        }
    };
    let identity_distance = manifest.results.get("identity_distance").and_then(|v| v.as_f64());
    Ok((
        JobResult {
            inversion_id: entry.id.clone(),
            result_url,
            identity_distance,
            manifest,
            cached,
        },
        run.out,
    ))
}

pub(crate) async fn job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = state.job(&id).ok_or_else(|| ApiError::not_found("job", &id))?;
    Ok(Json(job).into_response())
}

pub(crate) async fn job_result(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = state.job(&id).ok_or_else(|| ApiError::not_found("job", &id))?;
    let file = match (job.state, job.result_file) {
        (JobState::Done, Some(f)) => f,
        (JobState::Failed, _) => {
            return Err(ApiError::new(StatusCode::CONFLICT, format!("job `{id}` failed")));
        }
        _ => return Err(ApiError::new(StatusCode::CONFLICT, format!("job `{id}` has not finished"))),
    };
    let bytes = tokio::fs::read(&file)
        .await
        .map_err(|e| ApiError::from(Error::io(&file, e)))?;
    let ct = match job.kind {
        JobKind::Anonymize => "image/png",
        JobKind::Invert => "application/json",
    };
    Ok(([(header::CONTENT_TYPE, ct)], bytes).into_response())
}
