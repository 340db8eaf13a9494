//! HTTP front end over one loaded model.
//!
//! The model is shared immutable state; every request builds its own graph,
//! and inference runs on the blocking pool so slow images do not stall the
//! reactor. Every failure is answered with `{"error": {"code", "message"}}`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cfsnet::checkpoint::Provenance;
use cfsnet::eval::{
    fidelity, sweep_alpha, Adaptive, AlphaGrid, EvalError, MainOnly, Restorer, SharedAlpha, SweepReport,
};
use cfsnet::image::Image;
use cfsnet::model::CfsModel;
use cfsnet::wire::{
    decode_image, encode_image, CoeffsResponse, ErrorBody, ErrorDetail, GridSpec, Health, ModelInfo, RestoreRequest,
    RestoreResponse, SweepRequest,
};
use serde::Deserialize;
use tower_http::services::ServeDir;

/// Default cap on decoded image size, in pixels.
pub const DEFAULT_MAX_PIXELS: usize = 1024 * 1024;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    /// Largest accepted image (input, ground truth or dataset member), in pixels.
    pub max_pixels: usize,
    /// Directory served under `/ui`.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { max_pixels: DEFAULT_MAX_PIXELS, ui_dir: None }
    }
}

struct Inner {
    model: CfsModel,
    provenance: Provenance,
    model_id: String,
    config: ServerConfig,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(model: CfsModel, provenance: Provenance, config: ServerConfig) -> Self {
        let model_id = model.model_id();
        AppState(Arc::new(Inner { model, provenance, model_id, config }))
    }

    pub fn model(&self) -> &CfsModel {
        &self.0.model
    }

    /// Two base64 images of up to 3 bytes per pixel need 8 bytes per pixel;
    /// the rest is slack for container overhead and JSON framing.
    fn body_limit(&self) -> usize {
        self.0.config.max_pixels.saturating_mul(12).saturating_add(1 << 20)
    }
}

/// A failed request: status, stable code, human message and, for internal
/// failures, a correlation id that also appears in the log.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub id: Option<String>,
}

impl ApiError {
    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, code, message: message.into(), id: None }
    }

    fn too_large(message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::PAYLOAD_TOO_LARGE, code: "image_too_large", message: message.into(), id: None }
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        let id = uuid::Uuid::new_v4().to_string();
        tracing::error!(error_id = %id, "{message}");
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: "internal error; see server log".into(),
            id: Some(id),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: ErrorDetail { code: self.code.into(), message: self.message, id: self.id } };
        (self.status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        if r.status() == StatusCode::PAYLOAD_TOO_LARGE {
            return ApiError { status: r.status(), code: "payload_too_large", message: r.body_text(), id: None };
        }
        match r {
            JsonRejection::MissingJsonContentType(_) => ApiError {
                status: StatusCode::UNSUPPORTED_MEDIA_TYPE,
                code: "unsupported_media_type",
                message: r.body_text(),
                id: None,
            },
            _ => ApiError::bad_request("invalid_json", r.body_text()),
        }
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::bad_request("invalid_query", r.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: AppState) -> Router {
    let limit = state.body_limit();
    let mut app = Router::new()
        .route("/restore", post(restore))
        .route("/sweep", post(sweep))
        .route("/model", get(model_info))
        .route("/coeffs", get(coeffs))
        .route("/health", get(health));
    if let Some(dir) = &state.0.config.ui_dir {
        let index = dir.join("index.html");
        app = app.nest_service("/ui", ServeDir::new(dir).fallback(tower_http::services::ServeFile::new(index)));
    }
    app.fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn not_found() -> ApiError {
    ApiError { status: StatusCode::NOT_FOUND, code: "not_found", message: "no such endpoint".into(), id: None }
}

async fn method_not_allowed() -> ApiError {
    ApiError {
        status: StatusCode::METHOD_NOT_ALLOWED,
        code: "method_not_allowed",
        message: "method not allowed on this endpoint".into(),
        id: None,
    }
}

/// Runs CPU-bound work on the blocking pool; a panic becomes a 500.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

fn check_size(image: &Image, max_pixels: usize, what: &str) -> Result<(), ApiError> {
    if image.pixels() > max_pixels {
        return Err(ApiError::too_large(format!(
            "{what} is {}x{} ({} pixels); the limit is {max_pixels}",
            image.width(),
            image.height(),
            image.pixels()
        )));
    }
    Ok(())
}

fn decode_field(
    text: &str,
    field: &str,
    channels: usize,
    max_pixels: usize,
) -> Result<(Image, cfsnet::image::Format), ApiError> {
    let (image, format) =
        decode_image(text).map_err(|e| ApiError::bad_request("invalid_image", format!("{field}: {e}")))?;
    check_size(&image, max_pixels, field)?;
    if image.channels() != channels {
        return Err(ApiError::bad_request(
            "channel_mismatch",
            format!("{field} has {} channels, the model expects {channels}", image.channels()),
        ));
    }
    Ok((image, format))
}

async fn restore(
    State(state): State<AppState>,
    body: Result<Json<RestoreRequest>, JsonRejection>,
) -> ApiResult<RestoreResponse> {
    let Json(req) = body?;
    let alpha = req
        .alpha
        .finite()
        .ok_or_else(|| ApiError::bad_request("invalid_alpha", format!("alpha must be finite, got {}", req.alpha.0)))?;
    let cfg = &state.0.config;
    let channels = state.0.model.config().image_channels;
    let (input, format) = decode_field(&req.image, "image", channels, cfg.max_pixels)?;
    let scale = state.0.model.config().output_scale();
    let truth = req
        .ground_truth
        .as_deref()
        .map(|t| decode_field(t, "ground_truth", channels, cfg.max_pixels.saturating_mul(scale * scale)))
        .transpose()?;
    if let Some((gt, _)) = &truth {
        if (gt.height(), gt.width()) != (input.height() * scale, input.width() * scale) {
            return Err(ApiError::bad_request(
                "ground_truth_shape",
                format!(
                    "ground truth is {}x{}, restored output will be {}x{}",
                    gt.width(),
                    gt.height(),
                    input.width() * scale,
                    input.height() * scale
                ),
            ));
        }
    }

    let st = state.clone();
    let (restored, elapsed) = blocking(move || {
        let start = Instant::now();
        let out = Adaptive(&st.0.model).restore(&input, alpha).map_err(ApiError::internal)?.clipped();
        Ok((out, start.elapsed()))
    })
    .await?;
    let metrics = truth.map(|(gt, _)| fidelity(&restored, &gt)).transpose().map_err(ApiError::internal)?;
    let image = encode_image(&restored, format).map_err(ApiError::internal)?;
    Ok(Json(RestoreResponse {
        image,
        alpha,
        psnr: metrics.map(|m| m.psnr),
        rmse: metrics.map(|m| m.rmse),
        model_id: state.0.model_id.clone(),
        timing_ms: elapsed.as_secs_f64() * 1e3,
    }))
}

async fn sweep(
    State(state): State<AppState>,
    body: Result<Json<SweepRequest>, JsonRejection>,
) -> ApiResult<SweepReport> {
    let Json(req) = body?;
    req.spec.validate().map_err(|e| ApiError::bad_request("invalid_spec", e.to_string()))?;
    let grid = match &req.alphas {
        GridSpec::Text(t) => AlphaGrid::parse(t),
        GridSpec::Values(v) => AlphaGrid::new(v.clone()),
    }
    .map_err(|e| ApiError::bad_request("invalid_grid", e.to_string()))?;
    let method = req.method.clone().unwrap_or_else(|| "cfsnet".into());
    if !matches!(method.as_str(), "cfsnet" | "cfsnet-sa" | "main-only") {
        return Err(ApiError::bad_request("invalid_method", format!("unknown method {method:?}")));
    }
    let st = state.clone();
    let report = blocking(move || {
        let model = &st.0.model;
        let dataset = req
            .dataset
            .load(model.config().image_channels)
            .map_err(|e| ApiError::bad_request("invalid_dataset", e.to_string()))?;
        for img in &dataset {
            check_size(img, st.0.config.max_pixels, "dataset image")?;
        }
        let restorer: Box<dyn Restorer> = match method.as_str() {
            "cfsnet-sa" => Box::new(SharedAlpha(model)),
            "main-only" => Box::new(MainOnly(model)),
            _ => Box::new(Adaptive(model)),
        };
        sweep_alpha(restorer.as_ref(), &dataset, &req.spec, &grid).map_err(|e| match e {
            // A degradation that does not fit the model task (e.g. a scale the
            // model was not built for) shows up as a shape error.
            e @ (EvalError::Degrade(_) | EvalError::Shape(_) | EvalError::Image(_)) => {
                ApiError::bad_request("invalid_spec", e.to_string())
            }
            other => ApiError::internal(other),
        })
    })
    .await?;
    Ok(Json(report))
}

async fn model_info(State(state): State<AppState>) -> Json<ModelInfo> {
    Json(ModelInfo {
        model_id: state.0.model_id.clone(),
        config: state.0.model.config().clone(),
        provenance: state.0.provenance.clone(),
        parameter_count: state.0.model.parameter_count(),
    })
}

#[derive(Deserialize)]
struct CoeffsQuery {
    alpha: String,
}

async fn coeffs(
    State(state): State<AppState>,
    query: Result<Query<CoeffsQuery>, QueryRejection>,
) -> ApiResult<CoeffsResponse> {
    let Query(q) = query?;
    let alpha = q.alpha.trim().parse::<f64>().ok().filter(|a| a.is_finite()).ok_or_else(|| {
        ApiError::bad_request("invalid_alpha", format!("alpha must be a finite number, got {:?}", q.alpha))
    })?;
    let modules = state.0.model.map_control(alpha).map_err(ApiError::internal)?;
    Ok(Json(CoeffsResponse { alpha, model_id: state.0.model_id.clone(), modules }))
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health { status: "ok".into(), model_id: state.0.model_id.clone() })
}

/// Installs a stderr subscriber filtered by the `CFS_LOG` environment
/// variable (default `info`). Safe to call more than once.
pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("CFS_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

/// Serves until ctrl-c.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    serve_listener(state, tokio::net::TcpListener::bind(addr).await?).await
}

/// Serves on an already bound listener until ctrl-c.
pub async fn serve_listener(state: AppState, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, model_id = %state.0.model_id, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
