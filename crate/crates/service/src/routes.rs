use std::io::Write;
use std::sync::Arc;

use axum::body::{to_bytes, Body, Bytes};
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;
use tracing::{info, warn};
use voicerank_core::pipeline::{Identification, TimingReport};
use voicerank_core::Error;

use crate::config::CELEBRITY_MATCH;
use crate::{AppState, Models, ModelInfo};

const WAV_TYPES: [&str; 5] = ["audio/wav", "audio/x-wav", "audio/wave", "audio/vnd.wave", "application/octet-stream"];
const MIN_SPEECH_HINT: &str = "Record at least 5 seconds of speech.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultItem {
    pub rank: usize,
    pub speaker_id: String,
    pub display_name: String,
    pub score: f64,
    pub utterance_id: String,
    pub video_id: String,
    pub clip_start_s: f64,
    pub clip_end_s: f64,
    pub video_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifyResponse {
    pub request_id: String,
    pub method: String,
    pub results: Vec<ResultItem>,
    pub timing: TimingReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub request_id: String,
    pub error: String,
    pub message: String,
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    error: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            error,
            message: message.into(),
        }
    }

    fn into_response(self, request_id: String) -> Response {
        let body = ErrorBody {
            request_id,
            error: self.error.into(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let unprocessable = StatusCode::UNPROCESSABLE_ENTITY;
        match e {
            Error::MalformedContainer(_) | Error::UnsupportedEncoding(_) | Error::EmptyAudio => {
                Self::new(StatusCode::BAD_REQUEST, "MalformedAudio", e.to_string())
            }
            Error::TooShort { .. } => Self::new(unprocessable, "TooShort", format!("{e}. {MIN_SPEECH_HINT}")),
            Error::AllFramesRejected => Self::new(
                unprocessable,
                "AllFramesRejected",
                format!("no speech detected. {MIN_SPEECH_HINT}"),
            ),
            Error::TooLong { .. } => Self::new(unprocessable, "TooLong", e.to_string()),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "InternalError", other.to_string()),
        }
    }
}

/// Routes: `POST /api/identify`, `GET /api/health`, and the static bundle at `/`.
pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/api/identify", post(identify).layer(DefaultBodyLimit::disable()))
        .route("/api/health", get(health));
    let app = match state.config.server.static_dir.as_ref().filter(|d| d.is_dir()) {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(not_found),
    };
    app.with_state(state)
}

async fn not_found() -> Response {
    (StatusCode::NOT_FOUND, "not found").into_response()
}

#[derive(Debug, Deserialize)]
struct IdentifyQuery {
    method: Option<String>,
}

async fn identify(State(state): State<Arc<AppState>>, Query(query): Query<IdentifyQuery>, request: Request) -> Response {
    let request_id = state.next_request_id();
    let method = query.method.unwrap_or_else(|| CELEBRITY_MATCH.to_string());
    match run_identify(&state, &method, request).await {
        Ok(id) => {
            info!(%request_id, total_ms = id.timing.total_server, "identified");
            let results = id
                .results
                .into_iter()
                .map(|r| ResultItem {
                    rank: r.rank,
                    speaker_id: r.speaker_id,
                    display_name: r.display_name,
                    score: r.score,
                    utterance_id: r.best_utterance.utterance_id,
                    video_id: r.best_utterance.video_id,
                    clip_start_s: r.best_utterance.clip_start_s,
                    clip_end_s: r.best_utterance.clip_end_s,
                    video_url: r.video_url,
                })
                .collect();
            Json(IdentifyResponse {
                request_id,
                method,
                results,
                timing: id.timing,
            })
            .into_response()
        }
        Err(e) => {
            warn!(%request_id, status = e.status.as_u16(), error = e.error, "identify failed");
            e.into_response(request_id)
        }
    }
}

async fn run_identify(state: &Arc<AppState>, method: &str, request: Request) -> Result<Identification, ApiError> {
    if !state.config.methods.iter().any(|m| m == method) {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "UnknownMethod",
            format!("method {method:?} is not enabled"),
        ));
    }
    let engine = state.engine().ok_or_else(|| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "ModelsNotLoaded",
            "models are not loaded yet",
        )
    })?;
    let audio = read_audio(request, state.config.server.max_body_bytes).await?;

    let _permit = state.permits.clone().acquire_owned().await.map_err(|_| {
        ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "ShuttingDown", "server is shutting down")
    })?;
    let spool = state.config.server.spool_dir.clone();
    let k = state.config.server.k;
    tokio::task::spawn_blocking(move || -> Result<Identification, ApiError> {
        match spool {
            Some(dir) => {
                let mut file = tempfile::Builder::new()
                    .prefix("upload-")
                    .suffix(".wav")
                    .tempfile_in(&dir)
                    .map_err(internal)?;
                file.write_all(&audio).map_err(internal)?;
                drop(audio);
                let bytes = std::fs::read(file.path()).map_err(internal)?;
                file.close().map_err(internal)?;
                Ok(engine.identify_wav(&bytes, k)?)
            }
            None => Ok(engine.identify_wav(&audio, k)?),
        }
    })
    .await
    .map_err(internal)?
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "InternalError", e.to_string())
}

/// WAV bytes from a raw `audio/wav` body or the `audio` part of a multipart form.
async fn read_audio(request: Request, limit: usize) -> Result<Bytes, ApiError> {
    let too_large = || {
        ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "PayloadTooLarge",
            format!("request body exceeds {limit} bytes"),
        )
    };
    let declared = request
        .headers()
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok());
    if declared.is_some_and(|n| n > limit as u64) {
        return Err(too_large());
    }
    let content_type = request
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .map(|v| v.to_ascii_lowercase())
        .unwrap_or_default();
    let (parts, body) = request.into_parts();
    let bytes = to_bytes(body, limit).await.map_err(|_| too_large())?;

    if content_type.starts_with("multipart/form-data") {
        let request = Request::from_parts(parts, Body::from(bytes));
        let mut form = Multipart::from_request(request, &())
            .await
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "MalformedRequest", e.body_text()))?;
        while let Some(field) = form
            .next_field()
            .await
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "MalformedRequest", e.body_text()))?
        {
            if field.name() == Some("audio") {
                return field
                    .bytes()
                    .await
                    .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "MalformedRequest", e.body_text()));
            }
        }
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "MalformedRequest",
            "multipart body has no \"audio\" part",
        ));
    }
    let essence = content_type.split(';').next().unwrap_or("").trim();
    if essence.is_empty() || WAV_TYPES.contains(&essence) {
        Ok(bytes)
    } else {
        Err(ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "UnsupportedMediaType",
            format!("expected audio/wav or multipart/form-data, got {essence:?}"),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Health {
    pub status: &'static str,
    pub gallery_size: usize,
    pub speakers: usize,
    pub uptime_s: f64,
    pub methods: Vec<String>,
    pub model: Option<ModelInfo>,
    pub error: Option<String>,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    let uptime_s = state.started.elapsed().as_secs_f64();
    let methods = state.config.methods.clone();
    let health = match &*state.models.read().expect("state lock") {
        Models::Loading => Health {
            status: "loading",
            gallery_size: 0,
            speakers: 0,
            uptime_s,
            methods,
            model: None,
            error: None,
        },
        Models::Ready { engine, info } => Health {
            status: "ready",
            gallery_size: engine.index().len(),
            speakers: engine.gallery().len(),
            uptime_s,
            methods,
            model: Some(info.clone()),
            error: None,
        },
        Models::Failed(message) => Health {
            status: "error",
            gallery_size: 0,
            speakers: 0,
            uptime_s,
            methods,
            model: None,
            error: Some(message.clone()),
        },
    };
    Json(health)
}
