//! JSON-over-HTTP front of the session store.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::mentorflow::MentoringSession;
use crate::sample::Verdict;
use crate::service::SessionStore;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Mutex<SessionStore>>,
    /// Directory holding `<image_id>.png`.
    pub images_dir: PathBuf,
    /// Pixels per grid cell, `(height, width)`.
    pub cell_size: (usize, usize),
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    code: &'static str,
    message: String,
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::Precondition(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::InvalidInput(_) | Error::Json(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = ErrorBody {
            code: self.0.code(),
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Serialize)]
struct SessionView {
    #[serde(flatten)]
    session: MentoringSession,
    image_url: String,
    cell_size: (usize, usize),
    unanswered: Vec<String>,
}

fn view(state: &AppState, s: &MentoringSession) -> SessionView {
    SessionView {
        image_url: format!("/images/{}", s.image_id),
        cell_size: state.cell_size,
        unanswered: s.unanswered(),
        session: s.clone(),
    }
}

#[derive(Debug, Deserialize)]
struct FeedbackBody {
    detection_id: String,
    verdict: Verdict,
}

fn lock(state: &AppState) -> std::sync::MutexGuard<'_, SessionStore> {
    state.store.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

async fn next_session(State(state): State<AppState>) -> ApiResult<Response> {
    let store = lock(&state);
    Ok(match store.next_session() {
        Some(s) => Json(view(&state, s)).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let store = lock(&state);
    Ok(Json(view(&state, store.get(&id)?)))
}

async fn submit_feedback(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SessionView>> {
    let body: FeedbackBody =
        serde_json::from_slice(&body).map_err(|e| Error::InvalidInput(format!("feedback body: {e}")))?;
    let mut store = lock(&state);
    let s = store.submit_feedback(&id, &body.detection_id, body.verdict, Utc::now())?;
    Ok(Json(view(&state, s)))
}

async fn complete_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let mut store = lock(&state);
    let (s, _) = store.complete_session(&id, Utc::now())?;
    Ok(Json(view(&state, &s)))
}

async fn progress(State(state): State<AppState>) -> Json<crate::service::Progress> {
    Json(lock(&state).progress())
}

async fn image(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let safe = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if !safe {
        return Err(Error::NotFound(format!("image {id}")).into());
    }
    let path = state.images_dir.join(format!("{id}.png"));
    let bytes = match tokio::fs::read(&path).await {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::NotFound(format!("image {id}")).into()),
        Err(e) => return Err(Error::Io(e).into()),
    };
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions/next", get(next_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/feedback", post(submit_feedback))
        .route("/sessions/{id}/complete", post(complete_session))
        .route("/images/{id}", get(image))
        .route("/progress", get(progress))
        .with_state(state)
}

/// Resolves on SIGTERM or Ctrl-C.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// Serves until a termination signal, then flushes the event log.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> crate::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let store = state.store.clone();
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown_signal())
        .await?;
    store.lock().unwrap_or_else(|p| p.into_inner()).flush()?;
    Ok(())
}
