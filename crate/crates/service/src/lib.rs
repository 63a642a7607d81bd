//! HTTP+JSON backend for real-vs-synthetic (Turing) and labelling studies.
//!
//! Endpoints:
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/studies` | [`StudySpec`] | [`StudyCreated`] |
//! | POST | `/studies/{id}/sessions` | [`SessionRequest`] | [`SessionInfo`] |
//! | GET | `/sessions/{token}/next` | | [`NextItem`] |
//! | POST | `/sessions/{token}/judgments` | [`AnnotationRecord`] | [`JudgmentAck`] |
//! | POST | `/studies/{id}/close` | | [`Closed`] |
//! | GET | `/studies/{id}/report` | | [`StudyReport`] |
//! | GET | `/items/{item_id}/image` | | image bytes |
//!
//! Errors are `{"schema_version", "error": {"kind", "message"}}`.

pub mod error;
pub mod model;
pub mod store;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};

pub use error::{Result, ServiceError};
pub use model::*;
pub use store::{item_order, session_token, Event, Store};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Invalid(_) => StatusCode::BAD_REQUEST,
            ServiceError::Conflict(_)
            | ServiceError::OutOfOrder { .. }
            | ServiceError::StudyOpen(_)
            | ServiceError::StudyClosed(_) => StatusCode::CONFLICT,
            ServiceError::NoRecords(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{self}");
        }
        let body = ErrorResponse {
            schema_version: SCHEMA_VERSION,
            error: ErrorBody {
                kind: self.kind().to_string(),
                message: self.to_string(),
            },
        };
        (status, Json(body)).into_response()
    }
}

type AppState = Arc<Store>;

fn body<T>(payload: std::result::Result<Json<T>, JsonRejection>) -> Result<T> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ServiceError::Invalid(e.body_text()))
}

async fn create_study(
    State(store): State<AppState>,
    payload: std::result::Result<Json<StudySpec>, JsonRejection>,
) -> Result<(StatusCode, Json<StudyCreated>)> {
    Ok((StatusCode::CREATED, Json(store.create_study(body(payload)?)?)))
}

async fn create_session(
    State(store): State<AppState>,
    Path(id): Path<String>,
    payload: std::result::Result<Json<SessionRequest>, JsonRejection>,
) -> Result<Json<SessionInfo>> {
    Ok(Json(store.create_session(&id, body(payload)?)?))
}

async fn next_item(State(store): State<AppState>, Path(token): Path<String>) -> Result<Json<NextItem>> {
    Ok(Json(store.next_item(&token)?))
}

async fn submit(
    State(store): State<AppState>,
    Path(token): Path<String>,
    payload: std::result::Result<Json<AnnotationRecord>, JsonRejection>,
) -> Result<Json<JudgmentAck>> {
    Ok(Json(store.submit(&token, body(payload)?)?))
}

async fn close(State(store): State<AppState>, Path(id): Path<String>) -> Result<Json<Closed>> {
    Ok(Json(store.close(&id)?))
}

async fn report(State(store): State<AppState>, Path(id): Path<String>) -> Result<Json<StudyReport>> {
    Ok(Json(store.report(&id)?))
}

async fn image(State(store): State<AppState>, Path(item): Path<String>) -> Result<Response> {
    let path = store.image_path(&item)?;
    let bytes = tokio::fs::read(&path).await?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime), (header::CACHE_CONTROL, "no-store")], bytes).into_response())
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "schema_version": SCHEMA_VERSION, "status": "ok" }))
}

/// Permissive CORS plus the schema version header on every response.
async fn common_headers(req: Request, next: Next) -> Response {
    let mut res = if req.method() == Method::OPTIONS {
        StatusCode::NO_CONTENT.into_response()
    } else {
        next.run(req).await
    };
    let h = res.headers_mut();
    h.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    h.insert(header::ACCESS_CONTROL_ALLOW_METHODS, HeaderValue::from_static("GET, POST, OPTIONS"));
    h.insert(header::ACCESS_CONTROL_ALLOW_HEADERS, HeaderValue::from_static("content-type"));
    h.insert(
        "x-schema-version",
        HeaderValue::from_str(&SCHEMA_VERSION.to_string()).expect("ascii"),
    );
    res
}

pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/studies", post(create_study))
        .route("/studies/{id}/sessions", post(create_session))
        .route("/studies/{id}/close", post(close))
        .route("/studies/{id}/report", get(report))
        .route("/sessions/{token}/next", get(next_item))
        .route("/sessions/{token}/judgments", post(submit))
        .route("/items/{item_id}/image", get(image))
        .layer(middleware::from_fn(common_headers))
        .with_state(store)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, store: Arc<Store>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store)).await
}
