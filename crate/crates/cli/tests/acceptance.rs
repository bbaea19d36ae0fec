//! Acceptance report: one PASS/FAIL line per headline criterion.
//!
//! The pipeline criteria use the reference checkpoint in `artifacts/`
//! (trained from scratch and cached there when absent). The unit-level
//! suites are run from their own test binaries, so this target expects
//! `cargo test --workspace` to have built them.
//!
//! The process exits non-zero on any FAIL only when OODINV_ACCEPTANCE_STRICT
//! is set; otherwise it is a report.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::Array2;
use oodinv::data::child_seed;
use oodinv::edit::{apply_edit, edit_inversion, find_direction, fit_direction, fit_toy_directions, load_directions, EditDirection};
use oodinv::io::{image_png_bytes, mask_png_bytes, to_u8};
use oodinv::nets::LatentCode;
use oodinv::train::*;
use oodinv_tensor::init::{randn, rng};
use serde_json::{json, Value};

// Tolerances and budgets.
const ALGEBRA_SECS: f64 = 10.0;
const WARP_SECS: f64 = 30.0;
const LOSS_SECS: f64 = 60.0;
const OVERFIT_IMAGES: usize = 16;
const OVERFIT_STEPS: usize = 2000;
const MIN_PSNR_GAIN_DB: f64 = 2.0;
const MIN_IOU: f64 = 0.4;
const AOA_RANGE: [f64; 2] = [0.05, 0.5];
const N2_REC_SLACK: f64 = 1.05;
const SKIP_PSNR_SLACK_DB: f64 = 0.1;
const OOD_MASK_LEVEL: f64 = 0.99;
const OOD_MAX_LEVELS: u8 = 2;
const PLANTED_MIN_COS: f64 = 0.99;
const ADDITIVITY_TOL: f64 = 1e-12;
const EDIT_IMAGES: usize = 8;
const REFERENCE_BUDGET_MIN: f64 = 40.0;

type Outcome = Result<String, String>;

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, name: &str, outcome: Outcome) {
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
}

fn check(ok: bool, text: String, parts: &mut Vec<String>, failed: &mut bool) {
    if !ok {
        *failed = true;
    }
    parts.push(if ok { text } else { format!("[x] {text}") });
}

fn verdict(parts: Vec<String>, failed: bool) -> Outcome {
    let text = parts.join("; ");
    if failed {
        Err(text)
    } else {
        Ok(text)
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

/// Newest test executable named `<name>-<hash>` next to this one.
fn suite_binary(name: &str) -> Option<PathBuf> {
    let deps = std::env::current_exe().ok()?.parent()?.to_path_buf();
    let prefix = format!("{name}-");
    std::fs::read_dir(&deps)
        .ok()?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            let f = p.file_name().and_then(|f| f.to_str()).unwrap_or("");
            f.strip_prefix(&prefix).is_some_and(|h| h.len() == 16 && h.chars().all(|c| c.is_ascii_hexdigit()))
        })
        .max_by_key(|p| p.metadata().and_then(|m| m.modified()).ok())
}

fn run_suite(name: &str, filter: Option<&str>, limit_secs: Option<f64>) -> Outcome {
    let bin = suite_binary(name).ok_or(format!("test binary `{name}` not built (run cargo test --workspace)"))?;
    let mut cmd = Command::new(&bin);
    if let Some(f) = filter {
        cmd.args([f, "--exact"]);
    }
    let t = Instant::now();
    let out = cmd.output().map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let summary = stdout.lines().find(|l| l.starts_with("test result")).unwrap_or("no result line").to_string();
    let passed: usize = summary.split_whitespace().skip_while(|w| *w != "ok." && *w != "FAILED.").nth(1).and_then(|n| n.parse().ok()).unwrap_or(0);
    if !out.status.success() || passed == 0 {
        return Err(format!("{summary} ({secs:.1}s)"));
    }
    let detail = format!("{passed} tests passed in {secs:.1}s");
    match limit_secs {
        Some(l) if secs >= l => Err(format!("{detail}, over the {l:.0}s budget")),
        Some(l) => Ok(format!("{detail} (< {l:.0}s)")),
        None => Ok(detail),
    }
}

struct Reference {
    ckpt: Checkpoint,
    directions: Vec<EditDirection>,
    summary: Value,
    cfg: TrainConfig,
}

/// Loads the cached reference artifacts, training them first if needed.
fn reference() -> oodinv::Result<Reference> {
    let dir = workspace().join("artifacts");
    let ckpt_path = dir.join("reference.ckpt");
    let summary_path = dir.join("reference.json");
    let dir_path = dir.join("directions");
    let cfg = TrainConfig::reference();
    if !ckpt_path.exists() || !summary_path.exists() || !dir_path.exists() {
        println!("note: no cached reference checkpoint; training it now (this takes a while on CPU)");
        std::fs::create_dir_all(&dir)?;
        let mut ckpt = init_checkpoint(&cfg)?;
        let mut log = TrainLog::memory();
        let mut stages = serde_json::Map::new();
        for stage in [Stage::A1, Stage::A2, Stage::B] {
            let t = Instant::now();
            let s = train_stages(&mut ckpt, &cfg, &[stage], &mut log)?.remove(0);
            stages.insert(stage.name().into(), json!({ "seconds": t.elapsed().as_secs_f64(), "metrics": s.metrics }));
        }
        ckpt.save(&ckpt_path)?;
        for d in fit_toy_directions(&ckpt.model, 512, child_seed(cfg.seed, 77))? {
            d.save(&dir_path)?;
        }
        std::fs::write(&summary_path, serde_json::to_string_pretty(&json!({ "seed": cfg.seed, "stages": stages })).unwrap())?;
    }
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(&summary_path)?).map_err(|e| oodinv::Error::Format(e.to_string()))?;
    Ok(Reference { ckpt, directions: load_directions(&dir_path)?, summary, cfg })
}

fn pipeline_criterion(r: &Reference) -> Outcome {
    let (mut parts, mut failed) = (Vec::new(), false);
    let secs: f64 = ["a1", "a2", "b"].iter().filter_map(|s| r.summary["stages"][s]["seconds"].as_f64()).sum();
    parts.push(format!("reference training took {:.1} min on CPU (accelerator budget ~{REFERENCE_BUDGET_MIN:.0} min)", secs / 60.0));

    let mut overfit = r.ckpt.clone();
    let mut cfg = r.cfg.clone();
    cfg.b.steps = OVERFIT_STEPS;
    cfg.log_every = OVERFIT_STEPS;
    let train = alignment_train_set(&cfg).map_err(|e| e.to_string())?;
    reset_alignment(&mut overfit, &cfg).map_err(|e| e.to_string())?;
    let s = train_stage_b(&mut overfit, &cfg, Some(&train[..OVERFIT_IMAGES]), &mut TrainLog::memory()).map_err(|e| e.to_string())?;
    let (r0, r1) = (s.get("initial_rec"), s.get("final_rec"));
    check(r1 <= 0.5 * r0, format!("overfit L_rec {r0:.4} -> {r1:.4} ({:.2}x)", r0 / r1), &mut parts, &mut failed);

    let ev = eval_set(&r.cfg).map_err(|e| e.to_string())?;
    let rep = evaluate(&r.ckpt.model, &ev, &EvalOptions { jobs: 4, ..Default::default() }).map_err(|e| e.to_string())?;
    let dec = rep.decaled.clone().ok_or("eval set has no decaled images")?;
    let gain = dec.psnr_db - dec.plain_psnr_db;
    check(
        gain >= MIN_PSNR_GAIN_DB,
        format!("decaled PSNR {:.2} vs no-blend {:.2} dB (+{gain:.2})", dec.psnr_db, dec.plain_psnr_db),
        &mut parts,
        &mut failed,
    );
    let iou = rep.mask_iou.unwrap_or(0.0);
    check(iou >= MIN_IOU, format!("mask IoU {iou:.3}"), &mut parts, &mut failed);
    check(
        (AOA_RANGE[0]..=AOA_RANGE[1]).contains(&rep.aoa),
        format!("AOA {:.3}", rep.aoa),
        &mut parts,
        &mut failed,
    );
    verdict(parts, failed)
}

fn ablation_criterion(r: &Reference) -> Outcome {
    let (mut parts, mut failed) = (Vec::new(), false);
    let ev = eval_set(&r.cfg).map_err(|e| e.to_string())?;
    let run = |iterations: Option<usize>, skip: bool| {
        evaluate(&r.ckpt.model, &ev, &EvalOptions { iterations, skip_alignment: skip, jobs: 4, loss: None }).map_err(|e| e.to_string())
    };
    let (n1, n2, skip) = (run(Some(1), false)?, run(Some(2), false)?, run(Some(2), true)?);
    check(
        n2.rec_loss <= n1.rec_loss * N2_REC_SLACK,
        format!("eval L_rec N=2 {:.4} vs N=1 {:.4}", n2.rec_loss, n1.rec_loss),
        &mut parts,
        &mut failed,
    );
    let x = &ev.iter().find(|s| s.has_decal).ok_or("no decaled image")?.image;
    let mut scfg = r.ckpt.model.samm.cfg.clone();
    let a = r.ckpt.model.invert_with(x, &scfg).map_err(|e| e.to_string())?;
    scfg.skip_alignment = true;
    let b = r.ckpt.model.invert_with(x, &scfg).map_err(|e| e.to_string())?;
    check(a.blended != b.blended, "skip-alignment output differs".into(), &mut parts, &mut failed);
    check(
        skip.psnr_db <= n2.psnr_db + SKIP_PSNR_SLACK_DB,
        format!("PSNR skip {:.2} vs aligned {:.2} dB", skip.psnr_db, n2.psnr_db),
        &mut parts,
        &mut failed,
    );
    verdict(parts, failed)
}

fn editing_criterion(r: &Reference) -> Outcome {
    let (mut parts, mut failed) = (Vec::new(), false);
    let model = &r.ckpt.model;
    let smile = find_direction(&r.directions, "smile").map_err(|e| e.to_string())?;
    let ev = eval_set(&r.cfg).map_err(|e| e.to_string())?;
    let (mut identity, mut masks_equal, mut worst_ood, mut ood_pixels) = (true, true, 0u8, 0usize);
    let alphas = [smile.suggested_range[0], -1.0, 0.5, 1.0, smile.suggested_range[1]];
    for s in ev.iter().take(EDIT_IMAGES) {
        let inv = model.invert(&s.image).map_err(|e| e.to_string())?;
        let zero = edit_inversion(model, &s.image, &inv, smile, 0.0).map_err(|e| e.to_string())?;
        identity &= zero.output == inv.blended;
        for &alpha in &alphas {
            let e = edit_inversion(model, &s.image, &inv, smile, alpha).map_err(|e| e.to_string())?;
            masks_equal &= e.mask == zero.mask;
            for ((i, j), &m) in e.mask.values.indexed_iter() {
                if m > OOD_MASK_LEVEL {
                    for c in 0..3 {
                        ood_pixels += 1;
                        let (u, v) = (to_u8(e.output.pixels()[[c, i, j]]), to_u8(s.image.pixels()[[c, i, j]]));
                        worst_ood = worst_ood.max(u.abs_diff(v));
                    }
                }
            }
        }
    }
    check(identity, "strength 0 reproduces the blend bit-exactly".into(), &mut parts, &mut failed);
    check(masks_equal, "mask identical across strengths".into(), &mut parts, &mut failed);
    check(
        worst_ood < OOD_MAX_LEVELS,
        format!("max change where m > {OOD_MASK_LEVEL}: {worst_ood}/255 over {ood_pixels} channel-pixels"),
        &mut parts,
        &mut failed,
    );

    let inv = model.invert(&ev[0].image).map_err(|e| e.to_string())?;
    let mut additive = 0.0f64;
    for (a, b) in [(0.5, 0.25), (-1.0, 2.0), (1.5, -0.75)] {
        let two = apply_edit(&apply_edit(&inv.latent, smile, a).map_err(|e| e.to_string())?, smile, b).map_err(|e| e.to_string())?;
        let one = apply_edit(&inv.latent, smile, a + b).map_err(|e| e.to_string())?;
        additive = additive.max((two.styles() - one.styles()).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v)));
    }
    check(additive <= ADDITIVITY_TOL, format!("additivity error {additive:.1e}"), &mut parts, &mut failed);

    let (slots, dim) = (model.net.num_style_slots(), model.net.style_dim);
    let mut g = rng(4242);
    let truth: Array2<f64> = randn(&mut g, &[slots, dim]).into_dimensionality().unwrap();
    let samples: Vec<(LatentCode, f64)> = (0..512)
        .map(|_| {
            let w = LatentCode::new(randn(&mut g, &[slots, dim]).into_dimensionality().unwrap()).unwrap();
            let a = (w.styles() * &truth).sum();
            (w, a)
        })
        .collect();
    let d = fit_direction(&samples, "planted", None).map_err(|e| e.to_string())?;
    let cos = (&d.direction * &truth).sum() / (truth.mapv(|v| v * v).sum().sqrt());
    check(cos.abs() >= PLANTED_MIN_COS, format!("planted-direction |cos| {:.4}", cos.abs()), &mut parts, &mut failed);
    verdict(parts, failed)
}

async fn post(c: &reqwest::Client, url: &str, body: &Value) -> (u16, Value) {
    match c.post(url).json(body).send().await {
        Ok(r) => {
            let s = r.status().as_u16();
            (s, r.json().await.unwrap_or(Value::Null))
        }
        Err(e) => (0, json!({ "error": e.to_string() })),
    }
}

async fn service_checks(r: &Reference) -> Outcome {
    let (mut parts, mut failed) = (Vec::new(), false);
    let start = |ttl: Duration| {
        let cfg = oodinv_service::ServiceConfig { session_ttl: ttl, ..Default::default() };
        let state = Arc::new(oodinv_service::AppState::new(&r.ckpt, r.directions.clone(), &cfg).unwrap());
        async move {
            let l = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            let url = format!("http://{}/v1", l.local_addr().unwrap());
            tokio::spawn(oodinv_service::serve_on(l, state));
            url
        }
    };
    let url = start(Duration::from_secs(900)).await;
    let c = reqwest::Client::new();
    let health = c.get(format!("{url}/health")).send().await.map_err(|e| e.to_string())?;
    let hs = health.status().as_u16();
    let hv: Value = health.json().await.unwrap_or(Value::Null);
    check(hs == 200 && hv["checkpoint_id"] == r.ckpt.id().unwrap(), format!("health {hs}"), &mut parts, &mut failed);
    let dirs: Value = c.get(format!("{url}/directions")).send().await.map_err(|e| e.to_string())?.json().await.unwrap_or(Value::Null);
    let has_smile = dirs.as_array().is_some_and(|a| a.iter().any(|d| d["name"] == "smile"));
    check(has_smile, "directions lists smile".into(), &mut parts, &mut failed);

    let ev = eval_set(&r.cfg).map_err(|e| e.to_string())?;
    let img = B64.encode(image_png_bytes(&ev[0].image).unwrap());
    let (s1, a) = post(&c, &format!("{url}/invert"), &json!({ "image": img })).await;
    let (s2, b) = post(&c, &format!("{url}/invert"), &json!({ "image": img })).await;
    let fields = ["session_id", "inversion_png", "blended_png", "mask_png", "psnr", "ssim", "aoa"].iter().all(|k| !a[k].is_null());
    check(s1 == 200 && s2 == 200 && fields, format!("invert {s1} with all fields"), &mut parts, &mut failed);
    check(a["blended_png"] == b["blended_png"] && a["session_id"] != b["session_id"], "invert deterministic".into(), &mut parts, &mut failed);

    let wide = B64.encode(mask_png_bytes(&Array2::from_elem((16, 32), 0.5)).unwrap());
    let mut codes = Vec::new();
    let mut expect = |label: &str, got: u16, want: u16| {
        codes.push(format!("{label} {got}"));
        got == want
    };
    let id = a["session_id"].as_str().unwrap_or("");
    let edit = |strength: f64, dir: &str, sid: &str| json!({ "session_id": sid, "direction": dir, "strength": strength });
    let mut all = true;
    all &= expect("non-square", post(&c, &format!("{url}/invert"), &json!({ "image": wide })).await.0, 422);
    all &= expect("malformed", post(&c, &format!("{url}/invert"), &json!({ "image": "@@" })).await.0, 400);
    let huge = json!({ "image": "A".repeat(oodinv_service::MAX_BODY_BYTES + 1) });
    all &= expect("oversized", post(&c, &format!("{url}/invert"), &huge).await.0, 413);
    all &= expect("strength 3.5", post(&c, &format!("{url}/edit"), &edit(3.5, "smile", id)).await.0, 400);
    all &= expect("unknown direction", post(&c, &format!("{url}/edit"), &edit(1.0, "frown", id)).await.0, 400);
    let (s, v) = post(&c, &format!("{url}/edit"), &edit(1.0, "smile", "feedface")).await;
    all &= expect("unknown session", s, 404) && v["error"]["code"] == "session_not_found";
    let short = start(Duration::from_millis(200)).await;
    let (_, sv) = post(&c, &format!("{short}/invert"), &json!({ "image": img })).await;
    tokio::time::sleep(Duration::from_millis(400)).await;
    let (s, v) = post(&c, &format!("{short}/edit"), &edit(1.0, "smile", sv["session_id"].as_str().unwrap_or(""))).await;
    all &= expect("expired session", s, 404) && v["error"]["code"] == "session_expired";
    check(all, format!("status codes: {}", codes.join(", ")), &mut parts, &mut failed);

    let (s0, zero) = post(&c, &format!("{url}/edit"), &edit(0.0, "smile", id)).await;
    check(s0 == 200 && zero["edited_png"] == a["blended_png"], "edit strength 0 identical to blend".into(), &mut parts, &mut failed);
    let (_, one) = post(&c, &format!("{url}/edit"), &edit(1.0, "smile", id)).await;
    check(one["mask_png"] == a["mask_png"], "edit keeps the mask".into(), &mut parts, &mut failed);
    verdict(parts, failed)
}

fn main() {
    // Honor the test harness's listing protocol.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut report = Report { failures: 0 };
    println!("acceptance report");
    report.line("algebra suite", run_suite("algebra", None, Some(ALGEBRA_SECS)));
    report.line("warp suite", run_suite("warp", None, Some(WARP_SECS)));
    report.line("loss suite", run_suite("losses", None, Some(LOSS_SECS)));
    report.line("alignment replay (N = 1, 2, 3)", run_suite("align", Some("algorithm_replay_matches_reference_script"), None));
    match reference() {
        Ok(r) => {
            report.line("reference pipeline", pipeline_criterion(&r));
            report.line("ablation directions", ablation_criterion(&r));
            report.line("editing suite", editing_criterion(&r));
            let rt = tokio::runtime::Runtime::new().unwrap();
            report.line("service contract", rt.block_on(service_checks(&r)));
        }
        Err(e) => {
            for name in ["reference pipeline", "ablation directions", "editing suite", "service contract"] {
                report.line(name, Err(format!("reference checkpoint unavailable: {e}")));
            }
        }
    }
    println!("{} criteria failed", report.failures);
    if report.failures > 0 && std::env::var_os("OODINV_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
