//! HTTP/JSON front end for interactive review sessions.
//!
//! Jobs run on blocking threads; every read endpoint works from the last
//! published whole-iteration snapshot, so polling is safe during a run.

use std::collections::HashMap;
use std::io::Cursor;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use roireg::engine::{Baseline, Session, SessionConfig, Stage, TraceEntry, DEFAULT_ISO_ITERATIONS, DEFAULT_RSO_ITERATIONS};
use roireg::loss::gradient_share;
use roireg::transform::warp;
use roireg::volume::{decode_mha, encode_mha, extract_slice, rmse, window_level, Axis};
use roireg::{Dims, GradientShareReport, LossConfig, RegionPartition, RoiBox, Volume3};
use serde::{Deserialize, Serialize};

pub mod error;
pub mod store;

pub use error::{ApiError, ErrorBody};
pub use store::{Job, SessionEntry, Status, Store, View};

use error::json_error;

pub const DEFAULT_UPLOAD_LIMIT: usize = 512 * 1024 * 1024;
pub const ANATOMY_WINDOW: (f64, f64) = (-1000.0, 500.0);
pub const DIFF_WINDOW: (f64, f64) = (-500.0, 500.0);

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
}

pub fn router(store: Arc<Store>, upload_limit: usize) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(session_info))
        .route("/sessions/{id}/iso", post(start_iso))
        .route("/sessions/{id}/rso", post(start_rso))
        .route("/sessions/{id}/cancel", post(cancel))
        .route("/sessions/{id}/accept", post(accept))
        .route("/sessions/{id}/trace", get(trace))
        .route("/sessions/{id}/slice", get(slice))
        .route("/sessions/{id}/metrics", get(metrics))
        .route("/sessions/{id}/diagnose", get(diagnose))
        .route("/sessions/{id}/volume/{name}", get(download))
        .layer(DefaultBodyLimit::max(upload_limit))
        .with_state(AppState { store })
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker panicked: {e}")))?
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub dims: [usize; 3],
    pub stage: Stage,
}

async fn create_session(
    State(app): State<AppState>,
    multipart: Result<Multipart, MultipartRejection>,
) -> ApiResult<(StatusCode, Json<Created>)> {
    let mut multipart = multipart?;
    let (mut fixed, mut moving, mut config) = (None, None, None);
    while let Some(field) = multipart.next_field().await? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await?;
        match name.as_str() {
            "fixed" => fixed = Some(bytes),
            "moving" => moving = Some(bytes),
            "config" => config = Some(bytes),
            other => {
                return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", format!("unexpected part `{other}`"))
                    .with_field(other))
            }
        }
    }
    let missing = |part: &str| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", format!("missing part `{part}`")).with_field(part);
    let fixed = fixed.ok_or_else(|| missing("fixed"))?;
    let moving = moving.ok_or_else(|| missing("moving"))?;
    let config: SessionConfig = match config {
        Some(b) if !b.is_empty() => serde_json::from_slice(&b).map_err(|e| json_error(e, "config"))?,
        _ => SessionConfig::default(),
    };

    let session = blocking(move || {
        let fixed = decode_mha(&fixed, "fixed")?;
        let moving = decode_mha(&moving, "moving")?;
        if fixed.dims() != moving.dims() {
            return Err(dims_mismatch(fixed.dims(), moving.dims()));
        }
        Session::new(Arc::new(fixed), Arc::new(moving), config).map_err(|e| {
            let mut err = ApiError::from(e);
            if let Some(f) = &err.body.field {
                err.body.field = Some(format!("config.{f}"));
            }
            err
        })
    })
    .await?;
    let dims = session.fixed().dims().as_array();
    let stage = session.stage();
    let store = app.store.clone();
    let entry = blocking(move || Ok(store.insert(session)?)).await?;
    tracing::info!(session = %entry.id, ?dims, "created session");
    Ok((
        StatusCode::CREATED,
        Json(Created {
            id: entry.id.clone(),
            dims,
            stage,
        }),
    ))
}

fn dims_mismatch(fixed: Dims, moving: Dims) -> ApiError {
    ApiError::new(
        StatusCode::UNPROCESSABLE_ENTITY,
        "dimension_mismatch",
        format!("fixed is {fixed} but moving is {moving}"),
    )
    .with_field("moving")
    .with_details(serde_json::json!({ "fixed": fixed.as_array(), "moving": moving.as_array() }))
}

async fn list_sessions(State(app): State<AppState>) -> Json<Vec<String>> {
    Json(app.store.ids())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub created_at_ms: u64,
    pub status: Status,
    pub stage: Stage,
    pub iteration: u64,
    pub dims: [usize; 3],
    pub roi_history: Vec<RoiBox>,
    pub config: SessionConfig,
    pub trace_rows: usize,
    pub cancelled_at: Vec<u64>,
}

async fn session_info(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionInfo>> {
    let entry = app.store.get(&id)?;
    Ok(Json(entry.with_view(|v| SessionInfo {
        id: entry.id.clone(),
        created_at_ms: entry.created_at_ms,
        status: v.status.clone(),
        stage: v.stage,
        iteration: v.iteration(),
        dims: v.fixed.dims().as_array(),
        roi_history: v.roi_history.clone(),
        config: v.config,
        trace_rows: v.trace.len(),
        cancelled_at: v.trace.cancelled_at.clone(),
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IsoRequest {
    #[serde(default = "default_iso")]
    iterations: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RsoRequest {
    roi: RoiBox,
    #[serde(default = "default_rso")]
    iterations: usize,
}

fn default_iso() -> usize {
    DEFAULT_ISO_ITERATIONS
}

fn default_rso() -> usize {
    DEFAULT_RSO_ITERATIONS
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JobAccepted {
    pub status: Status,
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes, empty: &str) -> ApiResult<T> {
    let text: &[u8] = if body.iter().all(u8::is_ascii_whitespace) {
        empty.as_bytes()
    } else {
        body
    };
    serde_json::from_slice(text).map_err(|e| json_error(e, "body"))
}

async fn start_job(app: &AppState, id: &str, job: Job) -> ApiResult<(StatusCode, Json<JobAccepted>)> {
    let entry = app.store.get(id)?;
    entry.start(job)?;
    Ok((
        StatusCode::ACCEPTED,
        Json(JobAccepted {
            status: entry.with_view(|v| v.status.clone()),
        }),
    ))
}

async fn start_iso(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<JobAccepted>)> {
    app.store.get(&id)?;
    let req: IsoRequest = parse_body(&body, "{}")?;
    start_job(&app, &id, Job::Iso { iterations: req.iterations }).await
}

async fn start_rso(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<JobAccepted>)> {
    app.store.get(&id)?;
    let req: RsoRequest = parse_body(&body, "{}")?;
    start_job(
        &app,
        &id,
        Job::Rso {
            roi: req.roi,
            iterations: req.iterations,
        },
    )
    .await
}

async fn cancel(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<(StatusCode, Json<JobAccepted>)> {
    let entry = app.store.get(&id)?;
    entry.cancel()?;
    Ok((
        StatusCode::ACCEPTED,
        Json(JobAccepted {
            status: entry.with_view(|v| v.status.clone()),
        }),
    ))
}

async fn accept(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<JobAccepted>> {
    let entry = app.store.get(&id)?;
    let e = entry.clone();
    blocking(move || e.accept()).await?;
    Ok(Json(JobAccepted {
        status: entry.with_view(|v| v.status.clone()),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePage {
    pub rows: Vec<TraceEntry>,
    pub initial: Option<Baseline>,
    pub last_iteration: u64,
    pub cancelled_at: Vec<u64>,
    pub status: Status,
}

fn param<'a>(q: &'a HashMap<String, String>, key: &str) -> Option<&'a str> {
    q.get(key).map(|s| s.trim())
}

fn parse_param<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<T>> {
    param(q, key)
        .map(|s| s.parse::<T>().map_err(|_| ApiError::bad_param(key, format!("`{s}` is not a valid {key}"))))
        .transpose()
}

async fn trace(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<TracePage>> {
    let entry = app.store.get(&id)?;
    let since = parse_param::<i64>(&q, "since")?.unwrap_or(-1);
    Ok(Json(entry.with_view(|v| TracePage {
        rows: v.trace.since(since).to_vec(),
        initial: v.trace.initial,
        last_iteration: v.trace.last_iteration(),
        cancelled_at: v.trace.cancelled_at.clone(),
        status: v.status.clone(),
    })))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VolumeName {
    Fixed,
    Moving,
    Warped,
    Diff,
}

impl VolumeName {
    fn parse(s: &str, allow_diff: bool) -> ApiResult<Self> {
        match s {
            "fixed" => Ok(VolumeName::Fixed),
            "moving" => Ok(VolumeName::Moving),
            "warped" => Ok(VolumeName::Warped),
            "diff" if allow_diff => Ok(VolumeName::Diff),
            _ => Err(ApiError::bad_param(
                "volume",
                format!("`{s}` is not one of fixed, moving, warped{}", if allow_diff { ", diff" } else { "" }),
            )),
        }
    }

    fn render(self, v: &View) -> ApiResult<Arc<Volume3>> {
        Ok(match self {
            VolumeName::Fixed => v.fixed.clone(),
            VolumeName::Moving => v.moving.clone(),
            VolumeName::Warped => Arc::new(warp(&v.moving, &v.dvf)?),
            VolumeName::Diff => Arc::new(v.fixed.difference(&warp(&v.moving, &v.dvf)?)?),
        })
    }
}

fn parse_window(s: &str) -> ApiResult<(f64, f64)> {
    let bad = || ApiError::bad_param("window", format!("`{s}` is not `lo,hi`"));
    let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    Ok((lo, hi))
}

pub fn encode_png(width: usize, height: usize, gray: Vec<u8>) -> ApiResult<Vec<u8>> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, gray)
        .ok_or_else(|| ApiError::internal("slice size mismatch"))?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(out.into_inner())
}

async fn slice(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let entry = app.store.get(&id)?;
    let name = VolumeName::parse(
        param(&q, "volume").ok_or_else(|| ApiError::bad_param("volume", "required"))?,
        true,
    )?;
    let axis: Axis = match param(&q, "axis") {
        Some(s) => s.parse()?,
        None => Axis::Z,
    };
    let index: usize = parse_param(&q, "index")?.ok_or_else(|| ApiError::bad_param("index", "required"))?;
    let (lo, hi) = match param(&q, "window") {
        Some(s) => parse_window(s)?,
        None if name == VolumeName::Diff => DIFF_WINDOW,
        None => ANATOMY_WINDOW,
    };
    let view = entry.view();
    let png = blocking(move || {
        let extent = view.fixed.dims().as_array()[axis.index()];
        if index >= extent {
            return Err(ApiError::bad_param("index", format!("{index} is outside 0..{extent} along {axis}")));
        }
        let vol = name.render(&view)?;
        let img = window_level(&extract_slice(&vol, axis, index)?, lo, hi)?;
        let gray = img.gray().expect("windowed").to_vec();
        encode_png(img.width, img.height, gray)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iteration: u64,
    pub stage: Stage,
    pub full_rmse_hu: f64,
    pub roi: Option<RoiBox>,
    pub roi_rmse_hu: Option<f64>,
}

async fn metrics(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Metrics>> {
    let entry = app.store.get(&id)?;
    let roi: Option<RoiBox> = parse_param(&q, "roi")?;
    let view = entry.view();
    if let Some(r) = &roi {
        r.validate(view.fixed.dims())?;
    }
    blocking(move || {
        let warped = warp(&view.moving, &view.dvf)?;
        Ok(Json(Metrics {
            iteration: view.iteration(),
            stage: view.stage,
            full_rmse_hu: rmse(&view.fixed, &warped, None)?,
            roi_rmse_hu: roi.as_ref().map(|r| rmse(&view.fixed, &warped, Some(r))).transpose()?,
            roi,
        }))
    })
    .await
}

fn parse_blocks(s: &str) -> ApiResult<[usize; 3]> {
    let bad = || ApiError::bad_param("blocks", format!("`{s}` is not `bx,by,bz`"));
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<ApiResult<_>>()?;
    v.try_into().map_err(|_| bad())
}

async fn diagnose(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<GradientShareReport>> {
    let entry = app.store.get(&id)?;
    let blocks = parse_blocks(param(&q, "blocks").ok_or_else(|| ApiError::bad_param("blocks", "required"))?)?;
    let view = entry.view();
    blocking(move || {
        let partition = RegionPartition::blocks(view.fixed.dims(), blocks)?;
        let cfg = LossConfig {
            reg_weight: 0.0,
            ..view.config.loss
        };
        let mut report = gradient_share(&view.fixed, &view.moving, &view.dvf, &partition, &cfg)?;
        report.iteration = Some(view.iteration());
        Ok(Json(report))
    })
    .await
}

async fn download(State(app): State<AppState>, Path((id, name)): Path<(String, String)>) -> ApiResult<Response> {
    let entry = app.store.get(&id)?;
    let name = VolumeName::parse(&name, false)?;
    let view = entry.view();
    let bytes = blocking(move || Ok(encode_mha(&*name.render(&view)?))).await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}
