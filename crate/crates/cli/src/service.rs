//! HTTP API over a [`ZoomEngine`].
//!
//! | route                         | body or query                          |
//! |-------------------------------|----------------------------------------|
//! | `GET /images`                 |                                        |
//! | `GET /images/{id}/tile`       | `x`, `y` (grid column, row), `zoom`, `method` |
//! | `POST /images/{id}/zoom`      | `{focus_x, focus_y, zoom}`             |
//! | `GET /requests/{rid}/progress`|                                        |
//! | `POST /ratings`               | `{image_id, method, score}`            |
//!
//! Every failure is a JSON [`ApiError`].

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use splitsr_core::image_io::encode_png;
use splitsr_core::zoom::{clamp_zoom, route, Method, RouteStrategy, ZoomEngine, ZoomRequest};
use splitsr_core::Error;

static NEXT_ERROR_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    NotFound,
    BadRequest,
    OutsideGrid,
    Timeout,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
            ErrorCode::OutsideGrid => StatusCode::CONFLICT,
            ErrorCode::Timeout => StatusCode::GATEWAY_TIMEOUT,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Body of every non-success response.
#[derive(Debug, Serialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    /// Unique per error response, for matching client reports to logs.
    pub request_id: String,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError {
            code,
            message: message.into(),
            request_id: format!("err-{}", NEXT_ERROR_ID.fetch_add(1, Ordering::Relaxed)),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadRequest, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::UnknownName { kind: "image" | "request", .. } => ErrorCode::NotFound,
            Error::UnknownName { .. } | Error::InvalidArgument { .. } => ErrorCode::BadRequest,
            _ => ErrorCode::Internal,
        };
        ApiError::new(code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), Json(self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub struct AppState {
    engine: Arc<ZoomEngine>,
    ratings: Mutex<PathBuf>,
    tile_timeout: Duration,
}

impl AppState {
    pub fn new(engine: ZoomEngine, ratings: PathBuf) -> Arc<Self> {
        Arc::new(AppState {
            engine: Arc::new(engine),
            ratings: Mutex::new(ratings),
            tile_timeout: Duration::from_secs(120),
        })
    }

    pub fn engine(&self) -> &ZoomEngine {
        &self.engine
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/images", get(list_images))
        .route("/images/{id}/tile", get(tile))
        .route("/images/{id}/zoom", post(zoom))
        .route("/requests/{rid}/progress", get(progress))
        .route("/ratings", post(rate))
        .fallback(|| async { ApiError::new(ErrorCode::NotFound, "no such route") })
        .with_state(state)
}

async fn list_images(State(state): State<Arc<AppState>>) -> impl IntoResponse {
    Json(state.engine.with(|s| s.images()))
}

fn parse_zoom(text: Option<&str>) -> ApiResult<f64> {
    let text = text.ok_or_else(|| ApiError::bad_request("missing `zoom`"))?;
    let z: f64 = text
        .parse()
        .map_err(|_| ApiError::bad_request(format!("`zoom` must be a number, got `{text}`")))?;
    clamp_zoom(z).map_err(|e| ApiError::bad_request(e.to_string()))
}

fn parse_index(q: &HashMap<String, String>, name: &str) -> ApiResult<usize> {
    let text = q.get(name).ok_or_else(|| ApiError::bad_request(format!("missing `{name}`")))?;
    text.parse()
        .map_err(|_| ApiError::bad_request(format!("`{name}` must be a tile index, got `{text}`")))
}

fn parse_method(text: &str) -> ApiResult<Method> {
    text.parse().map_err(|_| {
        ApiError::bad_request(format!("`method` must be splitsr or bilinear, got `{text}`"))
    })
}

async fn tile(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let tiles = state.engine.with(|s| s.tiles(&id))?;
    let zoom = parse_zoom(q.get("zoom").map(String::as_str))?;
    let method = parse_method(q.get("method").map_or("splitsr", String::as_str))?;
    let (x, y) = (parse_index(&q, "x")?, parse_index(&q, "y")?);
    let rect = tiles.iter().find(|t| t.col == x && t.row == y).ok_or_else(|| {
        let cols = tiles.iter().map(|t| t.col + 1).max().unwrap_or(0);
        let rows = tiles.iter().map(|t| t.row + 1).max().unwrap_or(0);
        ApiError::new(ErrorCode::OutsideGrid, format!("tile ({x}, {y}) is outside the {cols}x{rows} grid"))
    })?;
    let index = rect.index;
    let timeout = state.tile_timeout;
    let engine = state.engine.clone();
    let png = tokio::task::spawn_blocking(move || -> Result<Vec<u8>, Error> {
        encode_png(&*engine.tile(&id, index, zoom, method, timeout)?)
    })
    .await
    .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?
    .map_err(|e| match e {
        Error::InvalidArgument { op: "tile", ref reason } if reason == "timed out" => {
            ApiError::new(ErrorCode::Timeout, e.to_string())
        }
        Error::InvalidArgument { op: "tile", .. } => ApiError::new(ErrorCode::Internal, e.to_string()),
        e => e.into(),
    })?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

fn json_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed JSON body: {e}")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ZoomBody {
    focus_x: f64,
    focus_y: f64,
    zoom: serde_json::Value,
}

#[derive(Debug, Serialize)]
pub struct ZoomAccepted {
    pub request_id: u64,
    pub image: String,
    /// After clamping to the supported range.
    pub zoom: f64,
    pub strategy: RouteStrategy,
}

async fn zoom(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<ZoomAccepted>> {
    state.engine.with(|s| s.image(&id))?;
    let b: ZoomBody = json_body(&body)?;
    let zoom = match &b.zoom {
        serde_json::Value::Number(n) => parse_zoom(Some(&n.to_string()))?,
        serde_json::Value::String(s) => parse_zoom(Some(s))?,
        other => return Err(ApiError::bad_request(format!("`zoom` must be a number, got {other}"))),
    };
    let request_id = state.engine.submit(ZoomRequest {
        image: id.clone(),
        focus_x: b.focus_x,
        focus_y: b.focus_y,
        zoom,
    })?;
    Ok(Json(ZoomAccepted {
        request_id,
        image: id,
        zoom,
        strategy: route(zoom),
    }))
}

async fn progress(State(state): State<Arc<AppState>>, Path(rid): Path<String>) -> ApiResult<Response> {
    let rid: u64 = rid
        .parse()
        .map_err(|_| ApiError::new(ErrorCode::NotFound, format!("no request `{rid}`")))?;
    Ok(Json(state.engine.poll(rid)?).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RatingBody {
    image_id: String,
    method: String,
    score: serde_json::Value,
}

#[derive(Debug, Serialize)]
pub struct Rating {
    pub image_id: String,
    pub method: Method,
    pub score: u8,
    pub unix_ms: u128,
}

async fn rate(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Rating>)> {
    let b: RatingBody = json_body(&body)?;
    state.engine.with(|s| s.image(&b.image_id))?;
    let method = parse_method(&b.method)?;
    let score = b
        .score
        .as_u64()
        .filter(|s| (1..=7).contains(s))
        .ok_or_else(|| ApiError::bad_request(format!("`score` must be an integer from 1 to 7, got {}", b.score)))?;
    let rating = Rating {
        image_id: b.image_id,
        method,
        score: score as u8,
        unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis()),
    };
    let line = serde_json::to_string(&rating).expect("plain data serializes");
    let path = state.ratings.lock().unwrap_or_else(|e| e.into_inner());
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(&*path)
        .and_then(|mut f| writeln!(f, "{line}"))
        .map_err(|e| ApiError::new(ErrorCode::Internal, format!("writing ratings log: {e}")))?;
    Ok((StatusCode::CREATED, Json(rating)))
}
