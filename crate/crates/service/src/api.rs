//! Routes. Every JSON payload carries `"v": 1`.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use bdinvert::editor::{self, EditDirection};
use bdinvert::generator::{FwPlusCode, NoiseMode};
use bdinvert::image_io;
use bdinvert::inversion::{InitDetail, InversionConfig, InversionResult};
use bdinvert::latent::{BaseTransform, GeometricTransform};
use bdinvert::pipeline::Assets;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::jobs::{Job, API_VERSION};
use crate::Shared;

/// Uploads up to 10 MB survive base64 inflation under this limit.
const BODY_LIMIT: usize = 16 << 20;

pub(crate) fn router(shared: Arc<Shared>) -> Router {
    let origin = match shared.config.console_origin.as_deref().map(HeaderValue::from_str) {
        Some(Ok(o)) => AllowOrigin::exact(o),
        _ => AllowOrigin::from(Any),
    };
    let cors = CorsLayer::new().allow_origin(origin).allow_methods(Any).allow_headers(Any);
    Router::new()
        .route("/api/invert", post(invert))
        .route("/api/jobs/{id}", get(job))
        .route("/api/directions", get(directions))
        .route("/api/edit", post(edit))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .layer(cors)
        .with_state(shared)
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        ApiError(status, msg.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "v": API_VERSION, "error": self.1 }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, r.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn check_version(v: Option<u32>) -> ApiResult<()> {
    match v {
        None => Ok(()),
        Some(API_VERSION) => Ok(()),
        Some(other) => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("unsupported payload version {other}"),
        )),
    }
}

#[derive(Deserialize)]
struct InvertRequest {
    v: Option<u32>,
    /// Base64 PNG or JPEG, optionally as a data URL.
    image: String,
    #[serde(default)]
    config_overrides: Map<String, Value>,
}

/// Merge overrides into the default config; unknown keys are rejected.
pub fn apply_overrides(base: &InversionConfig, overrides: &Map<String, Value>) -> Result<InversionConfig, String> {
    let mut v = serde_json::to_value(base).map_err(|e| e.to_string())?;
    let obj = v.as_object_mut().expect("config serializes to an object");
    for (k, val) in overrides {
        if !obj.contains_key(k) {
            return Err(format!("unknown config override {k:?}"));
        }
        obj.insert(k.clone(), val.clone());
    }
    let cfg: InversionConfig = serde_json::from_value(v).map_err(|e| format!("bad config override: {e}"))?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn decode_upload(data: &str) -> ApiResult<Vec<u8>> {
    let payload = match data.split_once(";base64,") {
        Some((prefix, rest)) if prefix.starts_with("data:") => rest,
        _ => data,
    };
    B64.decode(payload.trim())
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("image is not valid base64: {e}")))
}

fn assets(shared: &Shared) -> ApiResult<Arc<Assets>> {
    shared.assets.clone().ok_or_else(|| {
        ApiError::new(
            StatusCode::CONFLICT,
            format!(
                "checkpoints missing: {}",
                shared.assets_error.as_deref().unwrap_or("not loaded")
            ),
        )
    })
}

async fn invert(
    State(shared): State<Arc<Shared>>,
    body: Result<Json<InvertRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(req) = body?;
    check_version(req.v)?;
    let bytes = decode_upload(&req.image)?;
    let img = image_io::decode_image(&bytes)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("undecodable image: {e}")))?;
    let config = apply_overrides(&InversionConfig::default(), &req.config_overrides)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e))?;
    let assets = assets(&shared)?;
    if config.init_detail == InitDetail::WMean && assets.encoder.is_none() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "encoder checkpoint missing (set init_detail to encoder_free to invert without it)",
        ));
    }
    let res = assets.generator.config.output_resolution;
    let img = image_io::resize_square(&img, res).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;

    let id = ulid::Ulid::new().to_string();
    let input = shared.inputs_dir().join(format!("{id}.png"));
    let internal = |e: String| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e);
    image_io::save_png(&img, &input).map_err(|e| internal(e.to_string()))?;
    shared
        .jobs
        .lock()
        .expect("jobs lock")
        .insert(Job::new(id.clone(), config))
        .map_err(|e| internal(e.to_string()))?;
    shared
        .queue
        .lock()
        .expect("queue lock")
        .send(id.clone())
        .map_err(|_| internal("job queue is closed".into()))?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "v": API_VERSION, "job_id": id }))))
}

async fn job(State(shared): State<Arc<Shared>>, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    shared
        .jobs
        .lock()
        .expect("jobs lock")
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job {id}")))
}

#[derive(Serialize)]
struct DirectionSummary<'a> {
    name: &'a str,
    layer_range: [usize; 2],
    source: editor::DirectionSource,
}

async fn directions(State(shared): State<Arc<Shared>>) -> Json<Value> {
    let mut seen = std::collections::HashSet::new();
    let list: Vec<DirectionSummary<'_>> = shared
        .assets
        .iter()
        .flat_map(|a| a.directions.iter())
        .filter(|d| seen.insert(d.name.clone()))
        .map(|d| DirectionSummary {
            name: &d.name,
            layer_range: [d.layer_lo, d.layer_hi],
            source: d.source,
        })
        .collect();
    Json(json!({ "v": API_VERSION, "directions": list }))
}

#[derive(Clone, Debug, Deserialize)]
pub struct EditOp {
    pub direction: String,
    pub alpha: f64,
}

#[derive(Clone, Debug, Deserialize)]
pub struct EditRequest {
    pub v: Option<u32>,
    pub result_id: String,
    #[serde(default)]
    pub edits: Vec<EditOp>,
    pub style_mix_ref: Option<String>,
    /// Defaults to the whole detail range.
    pub style_mix_layers: Option<[usize; 2]>,
    /// Applied to the base code, in base-grid cells.
    pub transform: Option<GeometricTransform>,
    /// Include the edited detail code in the response.
    #[serde(default)]
    pub return_code: bool,
}

#[derive(Serialize)]
struct EditResponse {
    v: u32,
    image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    detail_code: Option<Vec<Vec<f32>>>,
}

fn result_dir(shared: &Shared, id: &str) -> ApiResult<PathBuf> {
    // ids are ULIDs; anything else cannot name a result and must not touch the filesystem
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, format!("unknown result {id}"));
    ulid::Ulid::from_string(id).map_err(|_| not_found())?;
    let dir = shared.results_dir().join(id);
    if dir.join(bdinvert::checkpoint::MANIFEST).is_file() {
        Ok(dir)
    } else {
        Err(not_found())
    }
}

fn load_result(shared: &Shared, assets: &Assets, id: &str) -> ApiResult<InversionResult> {
    let dir = result_dir(shared, id)?;
    InversionResult::load(&dir, &assets.generator)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("result {id}: {e}")))
}

fn unprocessable(e: impl ToString) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
}

fn run_edit(shared: &Shared, req: &EditRequest) -> ApiResult<EditResponse> {
    check_version(req.v)?;
    let assets = assets(shared)?;
    let cfg = &assets.generator.config;
    let mut code: FwPlusCode<f32> = load_result(shared, &assets, &req.result_id)?.code;
    if let Some(r) = &req.style_mix_ref {
        let reference = load_result(shared, &assets, r)?.code;
        let range = match req.style_mix_layers {
            Some([lo, hi]) => lo..=hi,
            None => editor::detail_range(cfg),
        };
        code = editor::style_mix(&code, &reference, range, cfg).map_err(unprocessable)?;
    }
    for op in &req.edits {
        let d: &EditDirection = assets
            .directions
            .iter()
            .find(|d| d.name == op.direction)
            .ok_or_else(|| unprocessable(format!("unknown direction {:?}", op.direction)))?;
        if !op.alpha.is_finite() {
            return Err(unprocessable("alpha must be finite"));
        }
        code = editor::apply_edit(&code, d, op.alpha, cfg).map_err(unprocessable)?;
    }
    if let Some(t) = &req.transform {
        t.validate().map_err(unprocessable)?;
        code.f = BaseTransform(t.clone()).apply(&code.f);
    }
    let img = assets
        .generator
        .synthesize_from_base(&code, NoiseMode::None)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let png = image_io::encode_png(&img).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(EditResponse {
        v: API_VERSION,
        image: B64.encode(png),
        detail_code: req
            .return_code
            .then(|| code.w_detail.iter().map(|w| w.data().to_vec()).collect()),
    })
}

async fn edit(
    State(shared): State<Arc<Shared>>,
    body: Result<Json<EditRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body?;
    let out = tokio::task::spawn_blocking(move || run_edit(&shared, &req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(out).into_response())
}
