//! Versioned JSON API over an immutable model snapshot.
//!
//! `POST /v1/invert` runs the full pipeline once and caches the result under
//! a session id; `POST /v1/edit` re-synthesizes an edited latent with the
//! cached masks and flows. Images travel as base64 PNG.

mod error;
mod sessions;

use std::net::SocketAddr;
use std::num::NonZeroUsize;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::extract::State;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use oodinv::edit::{edit_inversion, find_direction, EditDirection};
use oodinv::io::{image_from_bytes_at, image_png_bytes, mask_png_bytes};
use oodinv::pipeline::Model;
use oodinv::train::Checkpoint;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

pub use error::ApiError;
pub use sessions::{Session, SessionStore};

pub const MAX_BODY_BYTES: usize = 8 * 1024 * 1024;
pub const MAX_STRENGTH: f64 = 3.0;
pub const DEFAULT_ADDR: &str = "127.0.0.1:8765";

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub session_ttl: Duration,
    pub max_sessions: NonZeroUsize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { session_ttl: Duration::from_secs(15 * 60), max_sessions: NonZeroUsize::new(64).unwrap() }
    }
}

/// Shared, read-only model state plus the session cache.
pub struct AppState {
    pub model: Model,
    pub directions: Vec<EditDirection>,
    pub checkpoint_id: String,
    pub sessions: SessionStore,
}

impl AppState {
    pub fn new(ckpt: &Checkpoint, directions: Vec<EditDirection>, cfg: &ServiceConfig) -> oodinv::Result<Self> {
        Ok(AppState {
            model: ckpt.model.clone(),
            directions,
            checkpoint_id: ckpt.id()?,
            sessions: SessionStore::new(cfg.max_sessions, cfg.session_ttl),
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertRequest {
    pub image: String,
}

#[derive(Serialize, Deserialize, Debug)]
pub struct InvertResponse {
    pub session_id: String,
    pub inversion_png: String,
    pub blended_png: String,
    pub mask_png: String,
    pub psnr: f64,
    pub ssim: f64,
    pub aoa: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub session_id: String,
    pub direction: String,
    pub strength: f64,
}

#[derive(Serialize, Deserialize, Debug)]
pub struct EditResponse {
    pub edited_png: String,
    pub mask_png: String,
}

#[derive(Serialize, Deserialize, Debug)]
pub struct DirectionInfo {
    pub name: String,
    pub suggested_range: [f64; 2],
}

#[derive(Serialize, Deserialize, Debug)]
pub struct Health {
    pub status: String,
    pub checkpoint_id: String,
}

pub fn router(state: Arc<AppState>) -> Router {
    let v1 = Router::new()
        .route("/invert", post(invert))
        .route("/edit", post(edit))
        .route("/directions", get(directions))
        .route("/health", get(health));
    Router::new()
        .nest("/v1", v1)
        .fallback(|| async { ApiError::not_found("no_route", "no such endpoint") })
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    serve_on(listener, state).await
}

pub async fn serve_on(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn read_json<T: serde::de::DeserializeOwned>(body: Body) -> Result<T, ApiError> {
    let bytes = to_bytes(body, MAX_BODY_BYTES).await.map_err(|_| ApiError::too_large(MAX_BODY_BYTES))?;
    serde_json::from_slice(&bytes).map_err(|e| ApiError::bad_request("malformed_request", e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

fn png_b64(bytes: oodinv::Result<Vec<u8>>) -> Result<String, ApiError> {
    Ok(B64.encode(bytes?))
}

async fn invert(State(state): State<Arc<AppState>>, body: Body) -> Result<Json<InvertResponse>, ApiError> {
    let req: InvertRequest = read_json(body).await?;
    let raw = B64.decode(req.image.trim()).map_err(|e| ApiError::bad_request("malformed_image", format!("image is not valid base64: {e}")))?;
    let st = state.clone();
    let (session, resp) = blocking(move || {
        let r = st.model.net.output_resolution;
        let x = image_from_bytes_at(&raw, r)?;
        let inv = st.model.invert(&x)?;
        let m = inv.metrics(&x);
        let resp = InvertResponse {
            session_id: String::new(),
            inversion_png: png_b64(image_png_bytes(&inv.plain))?,
            blended_png: png_b64(image_png_bytes(&inv.blended))?,
            mask_png: png_b64(mask_png_bytes(&inv.gathered.values))?,
            psnr: m.psnr_db,
            ssim: m.ssim,
            aoa: m.aoa,
        };
        Ok((Session::new(x, inv), resp))
    })
    .await?;
    let session_id = state.sessions.insert(session);
    Ok(Json(InvertResponse { session_id, ..resp }))
}

async fn edit(State(state): State<Arc<AppState>>, body: Body) -> Result<Json<EditResponse>, ApiError> {
    let req: EditRequest = read_json(body).await?;
    if !req.strength.is_finite() || req.strength.abs() > MAX_STRENGTH {
        return Err(ApiError::bad_request(
            "strength_out_of_range",
            format!("strength must be within [-{MAX_STRENGTH}, {MAX_STRENGTH}], got {}", req.strength),
        ));
    }
    find_direction(&state.directions, &req.direction).map_err(|e| ApiError::bad_request("unknown_direction", e.to_string()))?;
    let session = state.sessions.get(&req.session_id)?;
    let st = state.clone();
    let resp = blocking(move || {
        let d = find_direction(&st.directions, &req.direction)?;
        let e = edit_inversion(&st.model, &session.image, &session.inversion, d, req.strength)?;
        Ok(EditResponse { edited_png: png_b64(image_png_bytes(&e.output))?, mask_png: png_b64(mask_png_bytes(&e.mask.values))? })
    })
    .await?;
    Ok(Json(resp))
}

async fn directions(State(state): State<Arc<AppState>>) -> Json<Vec<DirectionInfo>> {
    Json(state.directions.iter().map(|d| DirectionInfo { name: d.name.clone(), suggested_range: d.suggested_range }).collect())
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health { status: "ok".into(), checkpoint_id: state.checkpoint_id.clone() })
}
