//! JSON-over-HTTP inference service.
//!
//! Endpoints live under `/api/v1`: `POST /predict` classifies one image,
//! `GET /health` and `GET /model` describe the loaded model. Every 4xx
//! response carries a JSON body `{"code": ..., "message": ...}` with a stable
//! machine-readable code.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::body::{to_bytes, Body, Bytes};
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cxr_core::data::{ClassLabel, DataError, Preprocessing};
use cxr_core::predict::{PredictError, Predictor};
use serde::Serialize;
use thiserror::Error;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
pub const DEFAULT_MAX_BODY: usize = 10 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot load model {path}: {source}")]
    Model {
        path: String,
        #[source]
        source: PredictError,
    },
    #[error("model expects {model}-channel input but {requested} channels were requested")]
    ChannelMismatch { model: usize, requested: usize },
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub max_body_bytes: usize,
    /// Directory of static files served at `/` (the browser client).
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions {
            max_body_bytes: DEFAULT_MAX_BODY,
            ui_dir: None,
        }
    }
}

/// Loads a model file. When `channels` is given it must match the model's
/// input channels; uploads of either kind are converted regardless.
pub fn load_predictor(path: impl AsRef<Path>, channels: Option<usize>) -> Result<Predictor, ServeError> {
    let path = path.as_ref();
    let predictor = Predictor::load(path).map_err(|source| ServeError::Model {
        path: path.display().to_string(),
        source,
    })?;
    match channels {
        Some(requested) if requested != predictor.channels() => Err(ServeError::ChannelMismatch {
            model: predictor.channels(),
            requested,
        }),
        _ => Ok(predictor),
    }
}

#[derive(Clone)]
struct AppState {
    predictor: Arc<Predictor>,
    max_body: usize,
}

#[derive(Debug, Serialize)]
struct ApiError {
    code: &'static str,
    message: String,
}

fn error(status: StatusCode, code: &'static str, message: impl Into<String>) -> Response {
    (
        status,
        Json(ApiError {
            code,
            message: message.into(),
        }),
    )
        .into_response()
}

fn too_large(limit: usize) -> Response {
    error(
        StatusCode::PAYLOAD_TOO_LARGE,
        "payload_too_large",
        format!("request body exceeds {limit} bytes"),
    )
}

/// Builds the application router.
pub fn app(predictor: Arc<Predictor>, opts: &ServeOptions) -> Router {
    let state = AppState {
        predictor,
        max_body: opts.max_body_bytes,
    };
    let api = Router::new()
        .route("/predict", post(predict))
        .route("/health", get(health))
        .route("/model", get(model_info))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .with_state(state);
    let router = Router::new().nest("/api/v1", api);
    let router = match &opts.ui_dir {
        Some(dir) => router.fallback_service(ServeDir::new(dir)),
        None => router.fallback(not_found),
    };
    router
        .layer(DefaultBodyLimit::max(opts.max_body_bytes))
        .layer(middleware::from_fn(access_log))
}

/// Serves `app` until Ctrl-C.
pub async fn serve(listener: TcpListener, app: Router) -> Result<(), ServeError> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Binds `addr`, reporting failures as [`ServeError::Bind`].
pub async fn bind(addr: &str) -> Result<(TcpListener, SocketAddr), ServeError> {
    let bind_err = |source| ServeError::Bind {
        addr: addr.to_string(),
        source,
    };
    let listener = TcpListener::bind(addr).await.map_err(bind_err)?;
    let local = listener.local_addr().map_err(bind_err)?;
    Ok((listener, local))
}

async fn access_log(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let start = Instant::now();
    let response = next.run(req).await;
    tracing::info!(
        target: "cxr_serve::access",
        method = %method,
        path = %path,
        status = response.status().as_u16(),
        latency_ms = start.elapsed().as_secs_f64() * 1e3,
        "request"
    );
    response
}

async fn not_found() -> Response {
    error(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

async fn method_not_allowed() -> Response {
    error(
        StatusCode::METHOD_NOT_ALLOWED,
        "method_not_allowed",
        "method not allowed on this endpoint",
    )
}

#[derive(Serialize)]
struct Health<'a> {
    status: &'static str,
    model_hash: &'a str,
}

async fn health(State(state): State<AppState>) -> Response {
    Json(Health {
        status: "ok",
        model_hash: state.predictor.model_hash(),
    })
    .into_response()
}

#[derive(Serialize)]
struct ClassEntry {
    id: usize,
    name: &'static str,
}

#[derive(Serialize)]
struct Architecture<'a> {
    name: &'a str,
    width_mult: f64,
    input_shape: [usize; 3],
    num_classes: usize,
    parameters: usize,
    layers: Vec<&'static str>,
}

#[derive(Serialize)]
struct ModelInfo<'a> {
    model_name: &'a str,
    model_hash: &'a str,
    format_version: u32,
    architecture: Architecture<'a>,
    preprocessing: &'a Preprocessing,
    classes: Vec<ClassEntry>,
}

async fn model_info(State(state): State<AppState>) -> Response {
    let p = &state.predictor;
    let spec = &p.header().model;
    Json(ModelInfo {
        model_name: p.model_name(),
        model_hash: p.model_hash(),
        format_version: p.header().format_version,
        architecture: Architecture {
            name: spec.name.name(),
            width_mult: spec.width_mult,
            input_shape: spec.input_shape(),
            num_classes: spec.num_classes,
            parameters: p.network().param_count(),
            layers: spec.layers.iter().map(|l| l.tag()).collect(),
        },
        preprocessing: &p.header().preprocessing,
        classes: ClassLabel::ALL
            .iter()
            .map(|c| ClassEntry {
                id: c.id(),
                name: c.name(),
            })
            .collect(),
    })
    .into_response()
}

fn media_type(headers: &HeaderMap) -> Option<String> {
    let raw = headers.get(header::CONTENT_TYPE)?.to_str().ok()?;
    Some(raw.split(';').next()?.trim().to_ascii_lowercase())
}

/// Extracts the image bytes from a raw or multipart request.
async fn image_bytes(req: Request, limit: usize) -> Result<Bytes, Response> {
    let media = media_type(req.headers());
    match media.as_deref() {
        Some("image/png" | "image/jpeg") => to_bytes(req.into_body(), limit).await.map_err(|_| too_large(limit)),
        Some("multipart/form-data") => {
            let (parts, body) = req.into_parts();
            let bytes = to_bytes(body, limit).await.map_err(|_| too_large(limit))?;
            let req = Request::from_parts(parts, Body::from(bytes));
            let mut form = Multipart::from_request(req, &())
                .await
                .map_err(|e| error(StatusCode::BAD_REQUEST, "invalid_multipart", e.body_text()))?;
            loop {
                match form.next_field().await {
                    Ok(Some(field)) if field.name() == Some("file") => {
                        return field
                            .bytes()
                            .await
                            .map_err(|e| error(StatusCode::BAD_REQUEST, "invalid_multipart", e.body_text()));
                    }
                    Ok(Some(_)) => continue,
                    Ok(None) => {
                        return Err(error(
                            StatusCode::BAD_REQUEST,
                            "missing_file",
                            "multipart body has no \"file\" field",
                        ))
                    }
                    Err(e) => return Err(error(StatusCode::BAD_REQUEST, "invalid_multipart", e.body_text())),
                }
            }
        }
        other => Err(error(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "unsupported_media_type",
            format!(
                "content type {} is not supported; send image/png, image/jpeg or multipart/form-data",
                other.unwrap_or("(none)")
            ),
        )),
    }
}

async fn predict(State(state): State<AppState>, req: Request) -> Response {
    let bytes = match image_bytes(req, state.max_body).await {
        Ok(b) => b,
        Err(resp) => return resp,
    };
    let predictor = Arc::clone(&state.predictor);
    match tokio::task::spawn_blocking(move || predictor.predict_bytes(&bytes)).await {
        Ok(Ok(report)) => Json(report).into_response(),
        Ok(Err(PredictError::Data(e @ DataError::Decode(_)))) => {
            error(StatusCode::BAD_REQUEST, "decode_failed", e.to_string())
        }
        Ok(Err(PredictError::Data(e))) => error(StatusCode::BAD_REQUEST, "invalid_image", e.to_string()),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", e.to_string()),
    }
}
