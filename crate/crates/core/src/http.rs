//! HTTP front end for a live [`EdgeServer`].
//!
//! | route | body | reply |
//! |---|---|---|
//! | `POST /frame` | binary FrameUpload envelope | binary LocalGraphDown |
//! | `POST /interact` | binary Interaction envelope, or JSON | binary Ack, or JSON outcome |
//! | `GET /state?region=i0,j0,k0,i1,j1,k1` | | JSON snapshot |
//! | `GET /metrics` | | JSON counters |
//!
//! Devices that post before registering get a session without a bootstrap
//! pose. Anything else is served from the optional static directory.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tower_http::services::ServeDir;

use crate::graph::{CellKey, VirtualLine};
use crate::protocol::{self, InteractionMessage};
use crate::server::{EdgeServer, ServerError};
use crate::{DeviceId, VoId};

const OCTET_STREAM: &str = "application/octet-stream";

pub fn router(server: Arc<EdgeServer>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/frame", post(post_frame))
        .route("/interact", post(post_interact))
        .route("/state", get(get_state))
        .route("/metrics", get(get_metrics))
        .with_state(server);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, server: Arc<EdgeServer>, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(server, static_dir)).await
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, self.1).into_response()
    }
}

impl From<ServerError> for ApiError {
    fn from(e: ServerError) -> Self {
        let status = match &e {
            ServerError::UnknownDevice(_) | ServerError::UnknownVirtualObject(_) => StatusCode::NOT_FOUND,
            ServerError::StaleSequence { .. } => StatusCode::CONFLICT,
            ServerError::MalformedPayload(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServerError::Decode(_) | ServerError::UnexpectedMessage(_) => StatusCode::BAD_REQUEST,
            ServerError::Encode(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn binary(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, OCTET_STREAM)], bytes).into_response()
}

fn handle_binary(server: &EdgeServer, body: &[u8]) -> Result<Vec<u8>, ApiError> {
    let env = protocol::decode(body).map_err(ServerError::from)?;
    server.ensure_device(env.device_id);
    Ok(server.handle_message(body)?)
}

async fn post_frame(State(server): State<Arc<EdgeServer>>, body: Bytes) -> Result<Response, ApiError> {
    blocking(move || handle_binary(&server, &body)).await.map(binary)
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum JsonOp {
    Registration,
    Manipulation,
}

/// JSON form of an interaction, for browser clients.
#[derive(Debug, Clone, Deserialize)]
struct JsonInteraction {
    #[serde(default)]
    device_id: DeviceId,
    op: JsonOp,
    #[serde(default)]
    vo_id: VoId,
    position: [f64; 3],
    #[serde(default)]
    line: Option<VirtualLine>,
}

async fn post_interact(
    State(server): State<Arc<EdgeServer>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .map_or(false, |v| v.starts_with("application/json"));
    if !is_json {
        return blocking(move || handle_binary(&server, &body)).await.map(binary);
    }
    let req: JsonInteraction =
        serde_json::from_slice(&body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
    let position = crate::Vec3::from(req.position);
    let payload = req.line.map(|l| l.to_bytes()).unwrap_or_default();
    let msg = match req.op {
        JsonOp::Registration => InteractionMessage::registration(&position, payload),
        JsonOp::Manipulation => InteractionMessage::manipulation(req.vo_id, &position, payload),
    };
    let outcome = blocking(move || {
        server.ensure_device(req.device_id);
        Ok(server.handle_interaction(req.device_id, &msg)?)
    })
    .await?;
    Ok(Json(outcome).into_response())
}

#[derive(Debug, Deserialize)]
struct StateQuery {
    region: Option<String>,
}

/// `i0,j0,k0,i1,j1,k1`, an inclusive cell box.
fn parse_region(s: &str) -> Result<(CellKey, CellKey), ApiError> {
    let v: Vec<i64> = s
        .split(',')
        .map(|p| p.trim().parse::<i64>())
        .collect::<Result<_, _>>()
        .map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("region: {e}")))?;
    if v.len() != 6 {
        return Err(ApiError(StatusCode::BAD_REQUEST, "region needs six integers".into()));
    }
    Ok((CellKey::new(v[0], v[1], v[2]), CellKey::new(v[3], v[4], v[5])))
}

async fn get_state(
    State(server): State<Arc<EdgeServer>>,
    Query(q): Query<StateQuery>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let region = q.region.as_deref().map(parse_region).transpose()?;
    blocking(move || Ok(server.spectate(region))).await.map(Json)
}

async fn get_metrics(State(server): State<Arc<EdgeServer>>) -> Json<serde_json::Value> {
    Json(serde_json::to_value(server.metrics()).expect("metrics serialize"))
}
