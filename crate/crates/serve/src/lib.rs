//! HTTP inference service: promptable segmentation of single slices with a
//! hot-swappable checkpoint.
//!
//! Routes:
//! - `POST /v1/segment` returns an RLE class map for an image and point prompts
//! - `GET /v1/health` reports whether a model is loaded
//! - `POST /v1/model` atomically replaces the served checkpoint

mod request;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use arc_swap::ArcSwapOption;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use candle::{DType, Device};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};
use usam::checkpoint::{load_model, CheckpointMeta};
use usam::data::{load_dataset, resize_bilinear, resize_nearest, SlicePair};
use usam::decoder::predict_mask;
use usam::prompting::PromptSet;
use usam::rle::Rle;
use usam::USam;

pub use request::{
    decode_image, LogitsPayload, PairRequest, SegmentOptions, SegmentRequest, SegmentResponse, WindowSpec, HU_OFFSET,
    MAX_POINTS,
};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<usam::Error> for ApiError {
    fn from(e: usam::Error) -> Self {
        match e {
            usam::Error::PointOutOfBounds { .. } | usam::Error::Prompt(_) => Self::bad_request(e.to_string()),
            other => Self::internal(other),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

/// A checkpoint ready to serve.
pub struct LoadedModel {
    pub model: USam,
    pub meta: CheckpointMeta,
    pub path: PathBuf,
}

impl LoadedModel {
    pub fn load(path: &Path) -> usam::Result<Self> {
        let (model, meta) = load_model(path, DType::F32, &Device::Cpu)?;
        Ok(Self {
            model,
            meta,
            path: path.to_path_buf(),
        })
    }

    pub fn input_size(&self) -> usize {
        self.meta.input_size()
    }
}

#[derive(Default)]
pub struct AppState {
    model: ArcSwapOption<LoadedModel>,
    pairs: HashMap<(String, usize), SlicePair>,
}

impl AppState {
    pub fn new(model: Option<LoadedModel>) -> Self {
        Self {
            model: ArcSwapOption::new(model.map(Arc::new)),
            pairs: HashMap::new(),
        }
    }

    /// Make the pairs of a packed dataset addressable by `pair` requests.
    pub fn with_dataset(mut self, dir: &Path) -> usam::Result<Self> {
        let (_, pairs) = load_dataset(dir)?;
        self.pairs = pairs
            .into_iter()
            .map(|p| ((p.source.patient_id.clone(), p.source.slice_index), p))
            .collect();
        Ok(self)
    }

    pub fn current(&self) -> Option<Arc<LoadedModel>> {
        self.model.load_full()
    }

    pub fn swap(&self, model: LoadedModel) {
        self.model.store(Some(Arc::new(model)));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_loaded: bool,
    pub config_tag: Option<String>,
    pub step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadRequest {
    pub path: PathBuf,
}

/// `cors_origin` of `None` allows any origin.
pub fn router(state: Arc<AppState>, cors_origin: Option<&str>) -> Router {
    let cors = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST])
        .allow_headers(Any);
    let cors = match cors_origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(origin) => cors.allow_origin(origin),
        None => cors.allow_origin(Any),
    };
    Router::new()
        .route("/v1/segment", post(segment))
        .route("/v1/health", get(health))
        .route("/v1/model", post(load))
        .layer(cors)
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: Arc<AppState>, cors_origin: Option<&str>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, cors_origin))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    let current = state.current();
    Json(Health {
        status: "ok".into(),
        model_loaded: current.is_some(),
        config_tag: current.as_ref().map(|m| m.meta.config_tag.clone()),
        step: current.as_ref().map(|m| m.meta.step),
    })
}

async fn load(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<Health>, ApiError> {
    let req: LoadRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))?;
    let path = req.path.clone();
    let loaded = tokio::task::spawn_blocking(move || LoadedModel::load(&path))
        .await
        .map_err(ApiError::internal)?
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    tracing::info!(path = %req.path.display(), tag = %loaded.meta.config_tag, "model swapped");
    let health = Health {
        status: "ok".into(),
        model_loaded: true,
        config_tag: Some(loaded.meta.config_tag.clone()),
        step: Some(loaded.meta.step),
    };
    state.swap(loaded);
    Ok(Json(health))
}

async fn segment(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<SegmentResponse>, ApiError> {
    let start = Instant::now();
    let req = SegmentRequest::parse(&body)?;
    let image = match (&req.image, &req.pair) {
        (Some(b64), _) => decode_image(b64, req.window)?,
        (None, Some(p)) => state
            .pairs
            .get(&(p.patient_id.clone(), p.slice_index))
            .map(|pair| pair.image.clone())
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no pair {}/{}", p.patient_id, p.slice_index)))?,
        (None, None) => unreachable!("rejected by SegmentRequest::parse"),
    };
    let loaded = state
        .current()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"))?;
    let (h, w) = image.dim();
    let prompts = PromptSet { points: req.points };
    prompts.validate(h, w, loaded.model.config().num_classes)?;
    let return_logits = req.options.return_logits;
    let worker = Arc::clone(&loaded);
    let (mask, logits) = tokio::task::spawn_blocking(move || run(&worker, &image, &prompts, return_logits))
        .await
        .map_err(ApiError::internal)??;
    let rle = Rle::encode(&mask);
    Ok(Json(SegmentResponse {
        class_counts: rle.class_counts(loaded.model.config().num_classes),
        mask: rle,
        class_names: loaded.meta.class_names.clone(),
        config_tag: loaded.meta.config_tag.clone(),
        step: loaded.meta.step,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        logits,
    }))
}

/// Resize to the model input, predict, and map the class map back to the
/// submitted resolution.
pub fn run(
    loaded: &LoadedModel,
    image: &Array2<f32>,
    prompts: &PromptSet,
    return_logits: bool,
) -> usam::Result<(Array2<u8>, Option<LogitsPayload>)> {
    let (h, w) = image.dim();
    let s = loaded.input_size();
    let input = resize_bilinear(image, s, s).mapv(|v| v.clamp(0.0, 1.0));
    let prompts = prompts.rescaled((h, w), (s, s));
    let model = &loaded.model;
    let x = model.image_tensor(&[input.view()])?;
    let logits = model.forward(&x, std::slice::from_ref(&prompts))?.get(0)?;
    let mask = resize_nearest(&predict_mask(&logits)?, h, w);
    let payload = if return_logits {
        let logits = logits.to_dtype(DType::F32)?;
        let (n, lh, lw) = logits.dims3()?;
        let bytes: Vec<u8> = logits
            .flatten_all()?
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        Some(LogitsPayload {
            shape: [n, lh, lw],
            data_b64: base64::engine::general_purpose::STANDARD.encode(bytes),
        })
    } else {
        None
    };
    Ok((mask, payload))
}
