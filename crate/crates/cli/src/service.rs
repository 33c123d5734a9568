//! HTTP inference service.
//!
//! One checkpoint per process, loaded once and shared read-only between
//! requests. A checkpoint that fails to load does not stop the server: every
//! model endpoint then answers 503 with the load error, so a supervisor can
//! tell "up but unusable" from "down".

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use langedit_core::data::{decode_image, denormalize, encode_png, normalize, resize_square};
use langedit_core::eval::{attention_heatmaps, interpolate_text};
use langedit_core::nn::device;
use langedit_core::{load_editor, CheckpointManifest, Editor, Error, RgbImage, Tensor, Vocabulary};

pub const DEFAULT_MAX_PAYLOAD: usize = 8 * 1024 * 1024;
pub const MIN_STEPS: usize = 2;
pub const MAX_STEPS: usize = 16;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub max_payload_bytes: usize,
}

struct Loaded {
    editor: Editor,
    manifest: CheckpointManifest,
}

pub struct AppState {
    model: std::result::Result<Loaded, String>,
}

impl AppState {
    /// Loads the checkpoint, keeping the failure message instead of
    /// returning it.
    pub fn load(checkpoint: &Path, vocab: &Path) -> Self {
        let model = Vocabulary::load(vocab)
            .and_then(|v| load_editor(checkpoint, &v))
            .map(|(editor, manifest)| Loaded { editor, manifest })
            .map_err(|e| e.to_string());
        if let Err(e) = &model {
            log::error!("checkpoint unavailable: {e}");
        }
        Self { model }
    }

    pub fn from_editor(editor: Editor, manifest: CheckpointManifest) -> Self {
        Self {
            model: Ok(Loaded { editor, manifest }),
        }
    }

    fn loaded(&self) -> std::result::Result<&Loaded, ApiError> {
        self.model
            .as_ref()
            .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, format!("checkpoint unavailable: {e}")))
    }
}

pub fn router(state: Arc<AppState>, max_payload_bytes: usize) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/model-info", get(model_info))
        .route("/manipulate", post(manipulate))
        .route("/interpolate", post(interpolate))
        .layer(DefaultBodyLimit::max(max_payload_bytes))
        .with_state(state)
}

pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> anyhow::Result<()> {
    let state = {
        let config = config.clone();
        tokio::task::spawn_blocking(move || AppState::load(&config.checkpoint, &config.vocab)).await?
    };
    let app = router(Arc::new(state), config.max_payload_bytes);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[derive(Debug)]
pub struct ApiError {
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

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidDescription(_) | Error::Image(_) | Error::Shape(_) | Error::Data(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<BytesRejection> for ApiError {
    fn from(r: BytesRejection) -> Self {
        Self::new(r.status(), r.body_text())
    }
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct InterpolationOptions {
    pub target: String,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ManipulateRequest {
    /// Base64 of an encoded image (PNG or JPEG).
    pub image: String,
    pub description: String,
    #[serde(default)]
    pub heatmaps: bool,
    /// Also return the frames from `description` to `target`.
    #[serde(default)]
    pub interpolation: Option<InterpolationOptions>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct InterpolateRequest {
    pub image: String,
    pub description: String,
    pub target: String,
    pub steps: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WordHeatmap {
    pub index: usize,
    pub word: String,
    /// Base64 PNG, greyscale, at the output resolution.
    pub image: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManipulateResponse {
    pub image: String,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmaps: Option<Vec<WordHeatmap>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<String>>,
    pub checkpoint_id: String,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InterpolateResponse {
    pub frames: Vec<String>,
    pub width: usize,
    pub height: usize,
    pub checkpoint_id: String,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelInfo {
    pub checkpoint_id: String,
    pub kind: String,
    pub mode: Option<String>,
    pub resolution: usize,
    pub vocab_hash: String,
    pub vocab_size: usize,
    pub epoch: usize,
}

async fn healthz(State(state): State<Arc<AppState>>) -> Response {
    match state.loaded() {
        Ok(_) => Json(serde_json::json!({ "status": "ok" })).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn model_info(State(state): State<Arc<AppState>>) -> Result<Json<ModelInfo>, ApiError> {
    let m = state.loaded()?;
    Ok(Json(ModelInfo {
        checkpoint_id: m.manifest.id.clone(),
        kind: format!("{:?}", m.manifest.kind).to_lowercase(),
        mode: m.manifest.mode.map(|x| x.to_string()),
        resolution: m.editor.image_size(),
        vocab_hash: m.manifest.vocab_hash.clone(),
        vocab_size: m.editor.vocab().len(),
        epoch: m.manifest.epoch,
    }))
}

async fn manipulate(
    State(state): State<Arc<AppState>>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<ManipulateResponse>, ApiError> {
    let req: ManipulateRequest = parse_body(body?)?;
    state.loaded()?;
    blocking(move || handle_manipulate(&state, &req)).await.map(Json)
}

async fn interpolate(
    State(state): State<Arc<AppState>>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<InterpolateResponse>, ApiError> {
    let req: InterpolateRequest = parse_body(body?)?;
    state.loaded()?;
    blocking(move || handle_interpolate(&state, &req)).await.map(Json)
}

fn parse_body<T: serde::de::DeserializeOwned>(body: Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

fn check_description(text: &str, field: &str) -> Result<(), ApiError> {
    if text.trim().is_empty() {
        return Err(Error::InvalidDescription(format!("{field} is empty")).into());
    }
    Ok(())
}

fn check_steps(steps: usize) -> Result<(), ApiError> {
    if !(MIN_STEPS..=MAX_STEPS).contains(&steps) {
        return Err(ApiError::bad_request(format!(
            "steps must be in [{MIN_STEPS}, {MAX_STEPS}], got {steps}"
        )));
    }
    Ok(())
}

/// Decodes the base64 payload and fits it to the model resolution.
fn input_tensor(editor: &Editor, payload: &str) -> Result<Tensor, ApiError> {
    let bytes = BASE64
        .decode(payload.trim())
        .map_err(|e| ApiError::bad_request(format!("image is not valid base64: {e}")))?;
    let image = decode_image(&bytes).map_err(|e| ApiError::bad_request(format!("undecodable image: {e}")))?;
    if image.width() == 0 || image.height() == 0 {
        return Err(ApiError::bad_request("image is empty"));
    }
    let image = resize_square(&image, editor.image_size());
    Ok(normalize(&[&image], editor.dtype(), &device())?)
}

fn png_base64(image: &RgbImage) -> Result<String, ApiError> {
    Ok(BASE64.encode(encode_png(image)?))
}

fn frames_base64(frames: &[Tensor]) -> Result<Vec<String>, ApiError> {
    frames
        .iter()
        .map(|f| png_base64(&denormalize(f)?[0]))
        .collect()
}

pub fn handle_manipulate(state: &AppState, req: &ManipulateRequest) -> Result<ManipulateResponse, ApiError> {
    let started = Instant::now();
    let Loaded { editor, manifest } = state.loaded()?;
    check_description(&req.description, "description")?;
    if let Some(opts) = &req.interpolation {
        check_description(&opts.target, "interpolation target")?;
        check_steps(opts.steps)?;
    }
    let x = input_tensor(editor, &req.image)?;
    let out = editor.manipulate(&x, &[req.description.as_str()])?;
    let output = denormalize(&out.image)?.remove(0);
    let heatmaps = if req.heatmaps {
        let set = attention_heatmaps(editor, &x, &req.description, None)?;
        let maps = (0..set.words.len())
            .map(|i| {
                Ok(WordHeatmap {
                    index: i,
                    word: set.words[i].clone(),
                    image: BASE64.encode(set.map_png(i)?),
                })
            })
            .collect::<Result<Vec<_>, ApiError>>()?;
        Some(maps)
    } else {
        None
    };
    let frames = match &req.interpolation {
        Some(opts) => Some(frames_base64(&interpolate_text(
            editor,
            &x,
            &req.description,
            &opts.target,
            opts.steps,
        )?)?),
        None => None,
    };
    Ok(ManipulateResponse {
        image: png_base64(&output)?,
        width: output.width() as usize,
        height: output.height() as usize,
        heatmaps,
        frames,
        checkpoint_id: manifest.id.clone(),
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

pub fn handle_interpolate(state: &AppState, req: &InterpolateRequest) -> Result<InterpolateResponse, ApiError> {
    let started = Instant::now();
    let Loaded { editor, manifest } = state.loaded()?;
    check_description(&req.description, "description")?;
    check_description(&req.target, "target")?;
    check_steps(req.steps)?;
    let x = input_tensor(editor, &req.image)?;
    let frames = frames_base64(&interpolate_text(editor, &x, &req.description, &req.target, req.steps)?)?;
    Ok(InterpolateResponse {
        frames,
        width: editor.image_size(),
        height: editor.image_size(),
        checkpoint_id: manifest.id.clone(),
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}
