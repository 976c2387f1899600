//! HTTP chat service: sessions, turns with full traces, and health.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

use axum::extract::{FromRequest, Path, Request, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{Any, CorsLayer};

use crate::session::{append_record, ChatSession, Engine, TurnTrace};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn loading() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "model is still loading")
    }

    fn unknown(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown session {id}"))
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn internal(err: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, err.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

/// JSON body whose every rejection is a 422.
pub struct JsonBody<T>(pub T);

impl<S, T> FromRequest<S> for JsonBody<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(JsonBody(v)),
            Err(e) => Err(ApiError::unprocessable(e.body_text())),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub personas: Vec<String>,
    pub landmark: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnRequest {
    pub utterance: String,
}

type SessionCell = Arc<tokio::sync::Mutex<ChatSession>>;

/// Shared service state. The engine slot stays empty while the checkpoint loads.
#[derive(Default)]
pub struct AppState {
    engine: OnceLock<Arc<Engine>>,
    sessions: Mutex<HashMap<String, SessionCell>>,
    persist: Option<PathBuf>,
}

impl AppState {
    pub fn new(persist: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Self { persist, ..Default::default() })
    }

    pub fn with_engine(engine: Engine, persist: Option<PathBuf>) -> Arc<Self> {
        let state = Self::new(persist);
        state.set_engine(engine);
        state
    }

    pub fn set_engine(&self, engine: Engine) {
        let _ = self.engine.set(Arc::new(engine));
    }

    pub fn restore(&self, sessions: Vec<ChatSession>) {
        let mut map = self.sessions.lock().unwrap();
        for s in sessions {
            map.insert(s.id.clone(), Arc::new(tokio::sync::Mutex::new(s)));
        }
    }

    fn engine(&self) -> Result<Arc<Engine>, ApiError> {
        self.engine.get().cloned().ok_or_else(ApiError::loading)
    }

    fn session(&self, id: &str) -> Result<SessionCell, ApiError> {
        self.sessions.lock().unwrap().get(id).cloned().ok_or_else(|| ApiError::unknown(id))
    }

    fn persist<T: Serialize>(&self, id: &str, record: &T) -> Result<(), ApiError> {
        match &self.persist {
            Some(dir) => append_record(dir, id, record).map_err(ApiError::internal),
            None => Ok(()),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new().allow_origin(Any).allow_methods(Any).allow_headers(Any);
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/turns", post(post_turn))
        .layer(cors)
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match state.engine() {
        Ok(_) => Json(json!({ "status": "ok" })).into_response(),
        Err(_) => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "loading" }))).into_response(),
    }
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    JsonBody(body): JsonBody<CreateSession>,
) -> Result<Json<CreatedSession>, ApiError> {
    let engine = state.engine()?;
    if body.landmark.trim().is_empty() {
        return Err(ApiError::unprocessable("landmark must not be empty"));
    }
    if body.personas.iter().any(|p| p.trim().is_empty()) {
        return Err(ApiError::unprocessable("persona sentences must not be empty"));
    }
    let id = uuid::Uuid::new_v4().to_string();
    let sid = id.clone();
    let session = tokio::task::spawn_blocking(move || engine.open_session(sid, body.personas, body.landmark))
        .await
        .map_err(ApiError::internal)?
        .map_err(|e| ApiError::internal(format!("{e:#}")))?;
    state.persist(&id, &session)?;
    state.sessions.lock().unwrap().insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok(Json(CreatedSession { session_id: id }))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<ChatSession>, ApiError> {
    let cell = state.session(&id)?;
    let session = cell.lock().await.clone();
    Ok(Json(session))
}

async fn post_turn(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    JsonBody(body): JsonBody<TurnRequest>,
) -> Result<Json<TurnTrace>, ApiError> {
    let engine = state.engine()?;
    let cell = state.session(&id)?;
    if body.utterance.trim().is_empty() {
        return Err(ApiError::unprocessable("utterance must not be empty"));
    }
    let mut guard = cell.lock().await;
    let snapshot = guard.clone();
    let trace = tokio::task::spawn_blocking(move || engine.turn(&snapshot, &body.utterance))
        .await
        .map_err(ApiError::internal)?
        .map_err(|e| ApiError::internal(format!("{e:#}")))?;
    state.persist(&id, &trace)?;
    guard.push(trace.clone()).map_err(ApiError::internal)?;
    Ok(Json(trace))
}

/// Binds `addr`, loads the engine in the background and serves until Ctrl-C.
pub async fn serve(
    load: impl FnOnce() -> anyhow::Result<Engine> + Send + 'static,
    addr: SocketAddr,
    state: Arc<AppState>,
) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    let (tx, rx) = tokio::sync::oneshot::channel::<anyhow::Error>();
    let loader = state.clone();
    tokio::spawn(async move {
        match tokio::task::spawn_blocking(load).await {
            Ok(Ok(engine)) => {
                loader.set_engine(engine);
                eprintln!("model loaded");
            }
            Ok(Err(e)) => {
                let _ = tx.send(e);
            }
            Err(e) => {
                let _ = tx.send(e.into());
            }
        }
    });
    let failed = async move {
        tokio::select! {
            Ok(e) = rx => Some(e),
            _ = tokio::signal::ctrl_c() => None,
        }
    };
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let server = axum::serve(listener, router(state)).with_graceful_shutdown(async move {
        let _ = stop_rx.await;
    });
    let server = tokio::spawn(async move { server.await });
    let outcome = failed.await;
    let _ = stop_tx.send(());
    server.await??;
    match outcome {
        Some(e) => Err(e.context("loading the checkpoint")),
        None => Ok(()),
    }
}
