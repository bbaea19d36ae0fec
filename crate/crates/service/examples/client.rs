//! Starts the service on a free local port, inverts one toy face over HTTP
//! and applies an edit to the session.
//!
//!     cargo run --release -p oodinv-service --example client -- [checkpoint] [directions_dir]

use std::path::PathBuf;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use oodinv::edit::load_directions;
use oodinv::io::image_png_bytes;
use oodinv::train::{eval_set, Checkpoint, TrainConfig};
use oodinv_service::{serve_on, AppState, ServiceConfig};
use serde_json::{json, Value};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let ckpt = Checkpoint::load(&PathBuf::from(args.next().unwrap_or_else(|| "artifacts/reference.ckpt".into())))?;
    let dirs = load_directions(&PathBuf::from(args.next().unwrap_or_else(|| "artifacts/directions".into())))?;
    let state = Arc::new(AppState::new(&ckpt, dirs, &ServiceConfig::default())?);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let base = format!("http://{}/v1", listener.local_addr()?);
    tokio::spawn(serve_on(listener, state));

    let client = reqwest::Client::new();
    let image = B64.encode(image_png_bytes(&eval_set(&TrainConfig::reference())?.remove(0).image)?);
    let inv: Value = client.post(format!("{base}/invert")).json(&json!({ "image": image })).send().await?.json().await?;
    println!("invert: psnr {} ssim {} aoa {}", inv["psnr"], inv["ssim"], inv["aoa"]);
    let edit = json!({ "session_id": inv["session_id"], "direction": "smile", "strength": 1.5 });
    let resp = client.post(format!("{base}/edit")).json(&edit).send().await?;
    println!("edit: HTTP {}", resp.status());
    let body: Value = resp.json().await?;
    println!("edited_png: {} base64 chars", body["edited_png"].as_str().map_or(0, str::len));
    Ok(())
}
