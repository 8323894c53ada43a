//! HTTP routes.
//!
//! | method | path                          | body               |
//! |--------|-------------------------------|--------------------|
//! | POST   | /sessions/:user_id            | none               |
//! | POST   | /sessions/:user_id/turns      | `{speaker, text}`  |
//! | GET    | /memories/:user_id/:speaker   | none               |
//! | DELETE | /memories/:user_id            | none               |

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use ltm_core::Speaker;

use crate::{MemoryView, ServiceError, TurnReply, Users};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Backend(_) => StatusCode::BAD_GATEWAY,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnRequest {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub user_id: String,
    pub session_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryList {
    pub user_id: String,
    pub speaker: Speaker,
    pub entries: Vec<MemoryView>,
}

pub fn router(users: Arc<Users>) -> Router {
    Router::new()
        .route("/sessions/:user_id", post(create_session))
        .route("/sessions/:user_id/turns", post(turn))
        .route("/memories/:user_id/:speaker", get(list_memories))
        .route("/memories/:user_id", delete(purge))
        .with_state(users)
}

/// Runs blocking engine work off the async workers.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(ltm_core::Error::InvalidInput(format!("worker failed: {e}"))))?
}

async fn create_session(
    State(users): State<Arc<Users>>,
    Path(user_id): Path<String>,
) -> Result<(StatusCode, Json<SessionCreated>), ServiceError> {
    let uid = user_id.clone();
    let session_id = blocking(move || users.start_session(&uid)).await?;
    Ok((StatusCode::CREATED, Json(SessionCreated { user_id, session_id })))
}

async fn turn(
    State(users): State<Arc<Users>>,
    Path(user_id): Path<String>,
    Json(req): Json<TurnRequest>,
) -> Result<Json<TurnReply>, ServiceError> {
    blocking(move || users.turn(&user_id, req.speaker, &req.text)).await.map(Json)
}

async fn list_memories(
    State(users): State<Arc<Users>>,
    Path((user_id, speaker)): Path<(String, String)>,
) -> Result<Json<MemoryList>, ServiceError> {
    let speaker: Speaker = speaker
        .parse()
        .map_err(|_| ServiceError::NotFound(format!("no memory named {speaker:?}")))?;
    let uid = user_id.clone();
    let entries = blocking(move || users.memories(&uid, speaker)).await?;
    Ok(Json(MemoryList {
        user_id,
        speaker,
        entries,
    }))
}

async fn purge(State(users): State<Arc<Users>>, Path(user_id): Path<String>) -> Result<StatusCode, ServiceError> {
    blocking(move || users.purge(&user_id)).await?;
    Ok(StatusCode::NO_CONTENT)
}
