use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use candle::{DType, Device};
use http_body_util::BodyExt;
use image::{ImageBuffer, Luma};
use serde_json::{json, Value};
use tower::ServiceExt;
use usam::checkpoint::{save_checkpoint, CheckpointMeta};
use usam::rle::Rle;
use usam::training::TrainConfig;
use usam::{BackboneVariant, ModelConfig, USam};
use usam_serve::{router, AppState, Health, LoadedModel, SegmentResponse};

const H: u32 = 40;
const W: u32 = 48;

fn names() -> Vec<String> {
    vec!["background".into(), "rectum".into(), "tumor".into()]
}

fn write_ckpt(dir: &Path, seed: u64, step: u64) -> PathBuf {
    let cfg = ModelConfig::tiny(3);
    let model = USam::new(cfg.clone(), seed, DType::F32, &Device::Cpu).unwrap();
    let train = TrainConfig {
        backbone: BackboneVariant::Tiny,
        input_size: 32,
        ..TrainConfig::default()
    };
    let path = dir.join(format!("seed{seed}-step{step}.safetensors"));
    save_checkpoint(&path, &model, &CheckpointMeta::new(&cfg, &names(), step, Some(train)), None).unwrap();
    path
}

fn png_b64() -> String {
    let img = ImageBuffer::<Luma<u8>, _>::from_fn(W, H, |x, y| Luma([((x * 5 + y * 3) % 256) as u8]));
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    base64::engine::general_purpose::STANDARD.encode(out.into_inner())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn segment_body(points: Value, logits: bool) -> String {
    json!({"image": png_b64(), "points": points, "options": {"return_logits": logits}}).to_string()
}

fn health(v: Value) -> Health {
    serde_json::from_value(v).unwrap()
}

#[tokio::test]
async fn lifecycle_without_model() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Arc::new(AppState::new(None)), None);
    let (s, v) = call(&app, "GET", "/v1/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(!health(v).model_loaded);

    let (s, _) = call(&app, "POST", "/v1/segment", Some(segment_body(json!([]), false))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);

    let (s, v) = call(&app, "POST", "/v1/model", Some(json!({"path": dir.path().join("missing")}).to_string())).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].is_string());

    let ckpt = write_ckpt(dir.path(), 1, 5);
    let (s, v) = call(&app, "POST", "/v1/model", Some(json!({"path": ckpt}).to_string())).await;
    assert_eq!(s, StatusCode::OK);
    let h = health(v);
    assert_eq!(h.step, Some(5));
    let (_, v) = call(&app, "GET", "/v1/health", None).await;
    let h = health(v);
    assert!(h.model_loaded);
    assert_eq!(h.config_tag.as_deref(), Some(ModelConfig::tiny(3).tag().as_str()));
}

#[tokio::test]
async fn segment_contract() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_ckpt(dir.path(), 3, 11);
    let loaded = LoadedModel::load(&ckpt).unwrap();
    let tag = loaded.meta.config_tag.clone();
    let app = router(Arc::new(AppState::new(Some(loaded))), None);

    let points = json!([{"x": 10, "y": 20, "class_id": 1}, {"x": 47, "y": 39, "class_id": 2}]);
    let (s, a) = call(&app, "POST", "/v1/segment", Some(segment_body(points.clone(), true))).await;
    assert_eq!(s, StatusCode::OK, "{a}");
    let (_, b) = call(&app, "POST", "/v1/segment", Some(segment_body(points, true))).await;
    let a: SegmentResponse = serde_json::from_value(a).unwrap();
    let b: SegmentResponse = serde_json::from_value(b).unwrap();
    assert_eq!(a.mask, b.mask);
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.config_tag, tag);
    assert_eq!(a.step, 11);
    assert_eq!(a.class_names, names());

    let mask = a.mask.decode().unwrap();
    assert_eq!(mask.dim(), (H as usize, W as usize));
    assert_eq!(a.class_counts.iter().sum::<u64>(), (H * W) as u64);
    assert_eq!(a.class_counts, Rle::encode(&mask).class_counts(3));
    let logits = a.logits.unwrap();
    assert_eq!(logits.shape, [3, 32, 32]);
    let raw = base64::engine::general_purpose::STANDARD.decode(&logits.data_b64).unwrap();
    assert_eq!(raw.len(), 3 * 32 * 32 * 4);

    // no prompt at all is a valid request
    let (s, v) = call(&app, "POST", "/v1/segment", Some(segment_body(json!([]), false))).await;
    assert_eq!(s, StatusCode::OK);
    assert!(v.get("logits").is_none());
}

#[tokio::test]
async fn segment_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = LoadedModel::load(&write_ckpt(dir.path(), 0, 1)).unwrap();
    let app = router(Arc::new(AppState::new(Some(loaded))), None);
    let cases = [
        "{not json".to_string(),
        segment_body(json!([{"x": W, "y": 0, "class_id": 1}]), false),
        segment_body(json!([{"x": 0, "y": H, "class_id": 1}]), false),
        segment_body(json!([{"x": 0, "y": 0, "class_id": 0}]), false),
        segment_body(json!([{"x": 0, "y": 0, "class_id": 3}]), false),
        segment_body(json!([{"x": -1, "y": 0, "class_id": 1}]), false),
        json!({"image": "not base64!", "points": []}).to_string(),
        json!({"points": []}).to_string(),
        json!({"image": png_b64(), "window": {"center": 40.0, "width": 400.0}}).to_string(),
    ];
    for body in cases {
        let (s, v) = call(&app, "POST", "/v1/segment", Some(body.clone())).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{}: {v}", &body[..body.len().min(80)]);
        assert!(v["error"].is_string());
    }
    let (s, _) = call(&app, "POST", "/v1/segment", Some(json!({"pair": {"patient_id": "p", "slice_index": 0}}).to_string())).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn failed_swap_keeps_previous_model() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_ckpt(dir.path(), 0, 7);
    let app = router(Arc::new(AppState::new(Some(LoadedModel::load(&good).unwrap()))), None);
    let corrupt = dir.path().join("corrupt.safetensors");
    std::fs::write(&corrupt, b"\x08\0\0\0\0\0\0\0{}garbage").unwrap();
    for bad in [corrupt, dir.path().join("absent.safetensors")] {
        let (s, _) = call(&app, "POST", "/v1/model", Some(json!({"path": bad}).to_string())).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    }
    let (s, _) = call(&app, "POST", "/v1/model", Some("[]".into())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (_, v) = call(&app, "GET", "/v1/health", None).await;
    assert_eq!(health(v).step, Some(7));
    let (s, v) = call(&app, "POST", "/v1/segment", Some(segment_body(json!([]), false))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["step"], 7);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_swaps_never_blend_models() {
    let dir = tempfile::tempdir().unwrap();
    let ckpts = [write_ckpt(dir.path(), 10, 1), write_ckpt(dir.path(), 20, 2)];
    let points = json!([{"x": 24, "y": 20, "class_id": 1}]);

    // reference logits per model, each from a fresh single-model service
    let mut reference = std::collections::HashMap::new();
    for p in &ckpts {
        let app = router(Arc::new(AppState::new(Some(LoadedModel::load(p).unwrap()))), None);
        let (_, v) = call(&app, "POST", "/v1/segment", Some(segment_body(points.clone(), true))).await;
        let r: SegmentResponse = serde_json::from_value(v).unwrap();
        reference.insert(r.step, (r.mask, r.logits.unwrap()));
    }
    assert_ne!(reference[&1].1, reference[&2].1);

    let app = router(Arc::new(AppState::new(Some(LoadedModel::load(&ckpts[0]).unwrap()))), None);
    let mut tasks = Vec::new();
    for i in 0..12 {
        let (seg_app, swap_app) = (app.clone(), app.clone());
        let body = segment_body(points.clone(), true);
        tasks.push(tokio::spawn(async move { call(&seg_app, "POST", "/v1/segment", Some(body)).await }));
        let swap = json!({"path": ckpts[(i + 1) % 2]}).to_string();
        tasks.push(tokio::spawn(async move { call(&swap_app, "POST", "/v1/model", Some(swap)).await }));
    }
    let mut segments = 0;
    for t in tasks {
        let (s, v) = t.await.unwrap();
        assert_eq!(s, StatusCode::OK, "{v}");
        if v.get("mask").is_some() {
            let r: SegmentResponse = serde_json::from_value(v).unwrap();
            let (mask, logits) = &reference[&r.step];
            assert_eq!(&r.mask, mask);
            assert_eq!(r.logits.as_ref(), Some(logits));
            segments += 1;
        }
    }
    assert_eq!(segments, 12);
}

#[tokio::test]
async fn serves_dataset_pairs_and_cors() {
    let dir = tempfile::tempdir().unwrap();
    let spec = usam::data::SyntheticSpec {
        n_volumes: 1,
        slices_per_volume: 2,
        image_size: 64,
        outer_radius: [12.0, 16.0],
        wall_thickness: [4.0, 6.0],
        tumor_radius: [3.0, 5.0],
        ..Default::default()
    };
    let data = dir.path().join("data");
    let manifest = usam::data::generate_synthetic_dataset(&spec, &data).unwrap();
    let pair = &manifest.pairs[0];
    let state = AppState::new(Some(LoadedModel::load(&write_ckpt(dir.path(), 0, 1)).unwrap()))
        .with_dataset(&data)
        .unwrap();
    let app = router(Arc::new(state), Some("http://localhost:5173"));
    let body = json!({"pair": {"patient_id": pair.patient_id, "slice_index": pair.slice_index}, "points": []});
    let (s, v) = call(&app, "POST", "/v1/segment", Some(body.to_string())).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let r: SegmentResponse = serde_json::from_value(v).unwrap();
    assert_eq!(r.mask.decode().unwrap().dim(), (usam::data::PAIR_SIZE, usam::data::PAIR_SIZE));

    let req = Request::builder()
        .method("OPTIONS")
        .uri("/v1/segment")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(
        resp.headers().get("access-control-allow-origin").unwrap(),
        "http://localhost:5173"
    );
}
