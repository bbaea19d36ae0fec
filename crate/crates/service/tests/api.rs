use std::num::NonZeroUsize;
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use oodinv::data::make_dataset;
use oodinv::edit::fit_toy_directions;
use oodinv::io::{image_png_bytes, mask_png_bytes};
use oodinv::train::{init_checkpoint, param_hash, Checkpoint, TrainConfig};
use oodinv_service::*;
use reqwest::StatusCode;
use serde_json::{json, Value};

fn checkpoint() -> Checkpoint {
    init_checkpoint(&TrainConfig::reference()).unwrap()
}

async fn start(ckpt: &Checkpoint, cfg: ServiceConfig) -> (String, Arc<AppState>) {
    let dirs = fit_toy_directions(&ckpt.model, 48, 5).unwrap();
    let state = Arc::new(AppState::new(ckpt, dirs, &cfg).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    tokio::spawn(serve_on(listener, state.clone()));
    (url, state)
}

fn face_png(seed: u64) -> String {
    let s = make_dataset(1, seed, 1.0, 32).unwrap().remove(0);
    B64.encode(image_png_bytes(&s.image).unwrap())
}

async fn post(url: &str, body: Value) -> (StatusCode, Value) {
    let r = reqwest::Client::new().post(url).json(&body).send().await.unwrap();
    let status = r.status();
    (status, r.json().await.unwrap_or(Value::Null))
}

fn code(v: &Value) -> &str {
    v["error"]["code"].as_str().unwrap_or("")
}

#[tokio::test(flavor = "multi_thread")]
async fn health_and_directions() {
    let ckpt = checkpoint();
    let (url, _) = start(&ckpt, ServiceConfig::default()).await;
    let h1: Value = reqwest::get(format!("{url}/health")).await.unwrap().json().await.unwrap();
    let h2: Value = reqwest::get(format!("{url}/health")).await.unwrap().json().await.unwrap();
    assert_eq!(h1["status"], "ok");
    assert_eq!(h1["checkpoint_id"], h2["checkpoint_id"]);
    assert_eq!(h1["checkpoint_id"], ckpt.id().unwrap());
    let dirs: Vec<DirectionInfo> = reqwest::get(format!("{url}/directions")).await.unwrap().json().await.unwrap();
    assert!(dirs.iter().any(|d| d.name == "smile"));
    assert!(dirs.iter().all(|d| d.suggested_range[0] < d.suggested_range[1]));
    let r = reqwest::get(format!("{url}/nope")).await.unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn invert_contract_and_determinism() {
    let ckpt = checkpoint();
    let (url, state) = start(&ckpt, ServiceConfig::default()).await;
    let before = param_hash(&state.model.generator);
    let img = face_png(1);
    let (s1, a) = post(&format!("{url}/invert"), json!({ "image": img })).await;
    let (s2, b) = post(&format!("{url}/invert"), json!({ "image": img })).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    for key in ["session_id", "inversion_png", "blended_png", "mask_png", "psnr", "ssim", "aoa"] {
        assert!(!a[key].is_null(), "missing {key}");
    }
    assert_eq!(a["blended_png"], b["blended_png"]);
    assert_eq!(a["mask_png"], b["mask_png"]);
    assert_ne!(a["session_id"], b["session_id"]);
    assert_eq!(a["session_id"].as_str().unwrap().len(), 32);
    for key in ["inversion_png", "blended_png", "mask_png"] {
        let bytes = B64.decode(a[key].as_str().unwrap()).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
    let aoa = a["aoa"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&aoa));

    // A restarted service reproduces the artifacts.
    let (url2, _) = start(&ckpt, ServiceConfig::default()).await;
    let (_, c) = post(&format!("{url2}/invert"), json!({ "image": img })).await;
    assert_eq!(a["blended_png"], c["blended_png"]);
    assert_eq!(param_hash(&state.model.generator), before);
}

#[tokio::test(flavor = "multi_thread")]
async fn invert_rejects_bad_input() {
    let (url, _) = start(&checkpoint(), ServiceConfig::default()).await;
    let inv = format!("{url}/invert");
    let wide = B64.encode(mask_png_bytes(&ndarray::Array2::from_elem((16, 32), 0.5)).unwrap());
    let (s, v) = post(&inv, json!({ "image": wide })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(code(&v), "wrong_dimensions");
    let (s, v) = post(&inv, json!({ "image": "%%% not base64" })).await;
    assert_eq!((s, code(&v)), (StatusCode::BAD_REQUEST, "malformed_image"));
    let (s, v) = post(&inv, json!({ "image": B64.encode(b"plain text") })).await;
    assert_eq!((s, code(&v)), (StatusCode::BAD_REQUEST, "malformed_image"));
    let (s, v) = post(&inv, json!({ "picture": face_png(2) })).await;
    assert_eq!((s, code(&v)), (StatusCode::BAD_REQUEST, "malformed_request"));
    let r = reqwest::Client::new().post(&inv).body("{not json").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let huge = json!({ "image": "A".repeat(MAX_BODY_BYTES + 10) });
    let (s, v) = post(&inv, huge).await;
    assert_eq!((s, code(&v)), (StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large"));
    // A larger square image is resized rather than rejected.
    let big = B64.encode(mask_png_bytes(&ndarray::Array2::from_elem((64, 64), 0.5)).unwrap());
    assert_eq!(post(&inv, json!({ "image": big })).await.0, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread")]
async fn edit_contract() {
    let (url, _) = start(&checkpoint(), ServiceConfig::default()).await;
    let (_, inv) = post(&format!("{url}/invert"), json!({ "image": face_png(3) })).await;
    let id = inv["session_id"].as_str().unwrap();
    let edit = format!("{url}/edit");
    let (s, zero) = post(&edit, json!({ "session_id": id, "direction": "smile", "strength": 0.0 })).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(zero["edited_png"], inv["blended_png"], "strength 0 must reproduce the blend");
    let mut outputs = vec![zero["edited_png"].clone()];
    for strength in [-3.0, 0.5, 3.0] {
        let (s, e) = post(&edit, json!({ "session_id": id, "direction": "smile", "strength": strength })).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(e["mask_png"], inv["mask_png"], "mask changed at strength {strength}");
        outputs.push(e["edited_png"].clone());
    }
    assert_ne!(outputs[0], outputs[3]);

    let (s, v) = post(&edit, json!({ "session_id": id, "direction": "smile", "strength": 3.5 })).await;
    assert_eq!((s, code(&v)), (StatusCode::BAD_REQUEST, "strength_out_of_range"));
    let (s, v) = post(&edit, json!({ "session_id": id, "direction": "frown", "strength": 1.0 })).await;
    assert_eq!((s, code(&v)), (StatusCode::BAD_REQUEST, "unknown_direction"));
    let (s, v) = post(&edit, json!({ "session_id": "0123", "direction": "smile", "strength": 1.0 })).await;
    assert_eq!((s, code(&v)), (StatusCode::NOT_FOUND, "session_not_found"));
    let (s, v) = post(&edit, json!({ "session_id": id, "direction": "smile" })).await;
    assert_eq!((s, code(&v)), (StatusCode::BAD_REQUEST, "malformed_request"));
}

#[tokio::test(flavor = "multi_thread")]
async fn sessions_expire_and_are_evicted() {
    let cfg = ServiceConfig { session_ttl: Duration::from_millis(400), max_sessions: NonZeroUsize::new(2).unwrap() };
    let (url, state) = start(&checkpoint(), cfg).await;
    let mut ids = Vec::new();
    for seed in 0..3 {
        let (_, v) = post(&format!("{url}/invert"), json!({ "image": face_png(seed) })).await;
        ids.push(v["session_id"].as_str().unwrap().to_string());
    }
    assert_eq!(state.sessions.len(), 2);
    let edit = |id: &str| json!({ "session_id": id, "direction": "smile", "strength": 1.0 });
    let (s, v) = post(&format!("{url}/edit"), edit(&ids[0])).await;
    assert_eq!((s, code(&v)), (StatusCode::NOT_FOUND, "session_not_found"), "oldest session must be evicted");
    assert_eq!(post(&format!("{url}/edit"), edit(&ids[2])).await.0, StatusCode::OK);
    tokio::time::sleep(Duration::from_millis(600)).await;
    let (s, v) = post(&format!("{url}/edit"), edit(&ids[2])).await;
    assert_eq!((s, code(&v)), (StatusCode::NOT_FOUND, "session_expired"));
}

#[tokio::test(flavor = "multi_thread")]
async fn cross_origin_requests_are_allowed() {
    let (url, _) = start(&checkpoint(), ServiceConfig::default()).await;
    let r = reqwest::Client::new()
        .request(reqwest::Method::OPTIONS, format!("{url}/invert"))
        .header("Origin", "http://localhost:5173")
        .header("Access-Control-Request-Method", "POST")
        .send()
        .await
        .unwrap();
    assert!(r.status().is_success());
    assert!(r.headers().contains_key("access-control-allow-origin"));
}
