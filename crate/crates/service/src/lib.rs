//! Local HTTP service: α-controlled restoration over JSON with base64 PNG payloads.
//!
//! `POST /api/restore`, `GET /api/samples`, `GET /api/models`, `GET /api/health`.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

use latent_harmony::checkpoint::CheckpointBundle;
use latent_harmony::io::{decode_image, encode_png, image_dimensions, BitDepth};
use latent_harmony::pipeline::{validate_alpha, MetricsReport, Pipeline, DEFAULT_OVERLAP, DEFAULT_TILE};
use latent_harmony::ImageTensor;

pub const DEFAULT_PORT: u16 = 8787;
pub const DEFAULT_MAX_PIXELS: usize = 16_000_000;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub port: u16,
    pub max_pixels: usize,
    pub tile: usize,
    pub overlap: usize,
    /// Origins allowed by CORS; empty allows any origin.
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            port: DEFAULT_PORT,
            max_pixels: DEFAULT_MAX_PIXELS,
            tile: DEFAULT_TILE,
            overlap: DEFAULT_OVERLAP,
            cors_origins: vec!["http://localhost:5173".into(), "http://127.0.0.1:5173".into()],
        }
    }
}

/// A bundle loaded for serving.
#[derive(Debug)]
pub struct LoadedModel {
    pub id: String,
    pub stage: String,
    pub pipeline: Pipeline,
}

impl LoadedModel {
    pub fn from_bundle(id: impl Into<String>, bundle: &CheckpointBundle) -> latent_harmony::Result<Self> {
        Ok(Self {
            id: id.into(),
            stage: serde_json::to_value(bundle.stage)?.as_str().unwrap_or_default().to_string(),
            pipeline: Pipeline::from_bundle(bundle)?,
        })
    }

    /// Id = file stem plus the first 12 hex digits of the bundle digest.
    pub fn load(path: &Path) -> latent_harmony::Result<Self> {
        let bundle = CheckpointBundle::load(path)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
        let digest = bundle.digest()?;
        Self::from_bundle(format!("{stem}-{}", &digest[..12]), &bundle)
    }
}

pub struct Sample {
    pub id: &'static str,
    pub kind: &'static str,
    pub degraded: &'static [u8],
    pub reference: &'static [u8],
}

macro_rules! sample {
    ($id:literal, $kind:literal) => {
        Sample {
            id: $id,
            kind: $kind,
            degraded: include_bytes!(concat!("../samples/", $id, ".png")),
            reference: include_bytes!(concat!("../samples/", $id, ".ref.png")),
        }
    };
}

/// Degraded procedural images (with clean references) compiled into the binary.
pub static SAMPLES: [Sample; 4] = [
    sample!("gaussian-noise-01", "gaussian_noise"),
    sample!("low-light-02", "low_light"),
    sample!("haze-03", "haze"),
    sample!("gaussian-noise-04", "gaussian_noise"),
];

pub struct AppState {
    pub config: ServiceConfig,
    // written only while a model is being (re)loaded
    model: RwLock<Option<Arc<LoadedModel>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig, model: Option<LoadedModel>) -> Arc<Self> {
        Arc::new(Self { config, model: RwLock::new(model.map(Arc::new)) })
    }

    pub fn model(&self) -> Option<Arc<LoadedModel>> {
        self.model.read().expect("model lock poisoned").clone()
    }

    pub fn set_model(&self, model: Option<LoadedModel>) {
        *self.model.write().expect("model lock poisoned") = model.map(Arc::new);
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestoreRequest {
    /// Base64 PNG/JPEG; exactly one of `image` and `sample_id`.
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub sample_id: Option<String>,
    pub alpha: f64,
    /// Base64 reference image for metrics; sample requests use the bundled reference.
    #[serde(default)]
    pub reference: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RestoreResponse {
    pub image: String,
    pub metrics: Option<MetricsReport>,
    pub latency_ms: f64,
    pub alpha: f64,
    pub model_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleInfo {
    pub id: String,
    pub kind: String,
    pub width: usize,
    pub height: usize,
    pub image: String,
    pub reference: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub stage: String,
    pub has_adapters: bool,
    pub downsample: usize,
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    NotFound(String),
    Unavailable(String),
    Internal(String),
}

impl ApiError {
    fn parts(&self) -> (StatusCode, &'static str, &str) {
        match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, "bad_request", m),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, "not_found", m),
            ApiError::Unavailable(m) => (StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, "internal", m),
        }
    }
}

impl From<latent_harmony::Error> for ApiError {
    fn from(e: latent_harmony::Error) -> Self {
        match e {
            latent_harmony::Error::Image(_) | latent_harmony::Error::Ingestion(_) => ApiError::BadRequest(e.to_string()),
            e if e.is_validation() => ApiError::BadRequest(e.to_string()),
            e => ApiError::Internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code, message) = self.parts();
        (status, Json(serde_json::json!({ "error": { "code": code, "message": message } }))).into_response()
    }
}

fn decode_b64_image(field: &str, b64: &str, max_pixels: usize) -> Result<ImageTensor, ApiError> {
    let bytes = B64
        .decode(b64.trim())
        .map_err(|e| ApiError::BadRequest(format!("{field}: invalid base64: {e}")))?;
    let (w, h) = image_dimensions(&bytes).map_err(|e| ApiError::BadRequest(format!("{field}: {e}")))?;
    if w * h > max_pixels {
        return Err(ApiError::BadRequest(format!("{field}: {w}×{h} exceeds the {max_pixels}-pixel limit")));
    }
    decode_image(&bytes).map_err(|e| ApiError::BadRequest(format!("{field}: {e}")))
}

fn png_b64(img: &ImageTensor) -> Result<String, ApiError> {
    Ok(B64.encode(encode_png(img, BitDepth::Eight)?))
}

fn find_sample(id: &str) -> Result<&'static Sample, ApiError> {
    SAMPLES.iter().find(|s| s.id == id).ok_or_else(|| ApiError::NotFound(format!("no sample `{id}`")))
}

/// Validates a request and runs it against `model`. Blocking; call off the async executor.
pub fn handle_restore(state: &AppState, model: &LoadedModel, req: &RestoreRequest) -> Result<RestoreResponse, ApiError> {
    let start = Instant::now();
    validate_alpha(req.alpha).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let max = state.config.max_pixels;
    let (image, reference) = match (&req.image, &req.sample_id) {
        (Some(b64), None) => {
            let reference = req.reference.as_deref().map(|r| decode_b64_image("reference", r, max)).transpose()?;
            (decode_b64_image("image", b64, max)?, reference)
        }
        (None, Some(id)) => {
            let s = find_sample(id)?;
            let reference = match &req.reference {
                Some(r) => decode_b64_image("reference", r, max)?,
                None => decode_image(s.reference)?,
            };
            (decode_image(s.degraded)?, Some(reference))
        }
        _ => return Err(ApiError::BadRequest("give exactly one of `image` and `sample_id`".into())),
    };
    let (out, metrics) =
        model
            .pipeline
            .restore(&image, req.alpha, reference.as_ref(), state.config.tile, state.config.overlap)?;
    Ok(RestoreResponse {
        image: png_b64(&out)?,
        metrics,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        alpha: req.alpha,
        model_id: model.id.clone(),
    })
}

async fn restore(State(state): State<Arc<AppState>>, body: axum::body::Bytes) -> Result<Json<RestoreResponse>, ApiError> {
    let req: RestoreRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("malformed request: {e}")))?;
    let model = state.model().ok_or_else(|| ApiError::Unavailable("no model is loaded".into()))?;
    let st = state.clone();
    tokio::task::spawn_blocking(move || handle_restore(&st, &model, &req))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map(Json)
}

async fn samples() -> Result<Json<serde_json::Value>, ApiError> {
    let mut out = Vec::with_capacity(SAMPLES.len());
    for s in &SAMPLES {
        let (width, height) = image_dimensions(s.degraded)?;
        out.push(SampleInfo {
            id: s.id.into(),
            kind: s.kind.into(),
            width,
            height,
            image: B64.encode(s.degraded),
            reference: B64.encode(s.reference),
        });
    }
    Ok(Json(serde_json::json!({ "samples": out })))
}

async fn models(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let list: Vec<ModelInfo> = state
        .model()
        .map(|m| ModelInfo {
            id: m.id.clone(),
            stage: m.stage.clone(),
            has_adapters: m.pipeline.has_adapters(),
            downsample: m.pipeline.downsample(),
        })
        .into_iter()
        .collect();
    Json(serde_json::json!({ "models": list }))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "model_loaded": state.model().is_some() }))
}

fn cors(origins: &[String]) -> CorsLayer {
    let layer = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    if origins.is_empty() {
        layer.allow_origin(AllowOrigin::any())
    } else {
        let values: Vec<HeaderValue> = origins.iter().filter_map(|o| o.parse().ok()).collect();
        layer.allow_origin(values)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    // an incompressible RGB8 PNG is 3 bytes per pixel, 4 after base64; two images per request
    let body_limit = state.config.max_pixels.saturating_mul(8).max(1 << 20);
    Router::new()
        .route("/api/restore", post(restore))
        .route("/api/samples", get(samples))
        .route("/api/models", get(models))
        .route("/api/health", get(health))
        .layer(DefaultBodyLimit::max(body_limit))
        .layer(cors(&state.config.cors_origins))
        .with_state(state)
}

/// Binds `127.0.0.1:port` and serves until the process is stopped.
pub async fn serve(state: Arc<AppState>) -> std::io::Result<()> {
    let addr = SocketAddr::from(([127, 0, 0, 1], state.config.port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{addr}");
    axum::serve(listener, router(state)).await
}
