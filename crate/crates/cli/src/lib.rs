//! `oodinv` command line: dataset generation, staged training, inversion,
//! editing, mask dumps, evaluation and the HTTP service.
//!
//! Exit codes: 0 on success, 2 when the input is invalid (bad flags,
//! missing files, wrong shapes, unmet stage preconditions), 1 when
//! something fails while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use oodinv::data::{export_dataset, load_dataset, make_dataset};
use oodinv::edit::{edit_inversion, find_direction, fit_toy_directions, load_directions, DIRECTION_EXT};
use oodinv::io::{read_image_at, write_image, write_mask};
use oodinv::pipeline::{Inversion, Model};
use oodinv::samm::SammConfig;
use oodinv::train::{evaluate, init_checkpoint, train_stages, Checkpoint, EvalOptions, Stage, TrainConfig, TrainLog};
use oodinv::{Error, Result};
use serde_json::json;

pub const CHECKPOINT_DIR_ENV: &str = "OODINV_CHECKPOINT_DIR";
pub const DEFAULT_CHECKPOINT: &str = "oodinv.ckpt";
pub const METRICS_FILE: &str = "metrics.json";
/// Latents used to fit the shipped editing directions after encoder training.
pub const DIRECTION_FIT_SAMPLES: usize = 512;

#[derive(Parser, Debug)]
#[command(name = "oodinv", version, about = "Out-of-domain GAN inversion with alignment-and-masking")]
pub struct Cli {
    /// Root seed for all randomness [default: 0, or the config file's seed].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a toy face dataset with decals and ground-truth masks.
    Data(DataArgs),
    /// Train the generator (a1), encoder (a2) and alignment module (b).
    Train(TrainArgs),
    /// Invert an image and write the inversion, blend and masks.
    Invert(InvertArgs),
    /// Invert, edit along a named direction, and blend.
    Edit(EditArgs),
    /// Write only the per-level and gathered masks of an image.
    Masks(InvertArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Print a training configuration with all defaults.
    PrintConfig(PresetArgs),
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    /// Fraction of images that receive a decal.
    #[arg(long, default_value_t = 0.7)]
    pub decal_rate: f64,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Reduced model and budgets sized for a single CPU core.
    Reference,
    /// 64x64 model with three alignment levels.
    Full,
}

#[derive(Args, Debug)]
pub struct PresetArgs {
    #[arg(long, value_enum, default_value_t = Preset::Reference)]
    pub preset: Preset,
    /// TOML file applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    A1,
    A2,
    B,
    All,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub preset: PresetArgs,
    /// Where to write the trained checkpoint.
    #[arg(long, required_unless_present = "print_config")]
    pub out: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub print_config: bool,
    /// Stages to run, in order.
    #[arg(long, value_enum, default_values_t = [StageArg::All])]
    pub stage: Vec<StageArg>,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Line-delimited JSON training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Also write periodic snapshots to `<out>.snapshot` (every `checkpoint_every` steps).
    #[arg(long)]
    pub snapshots: bool,
    /// Directory for editing directions fitted after encoder training
    /// [default: `directions` next to --out].
    #[arg(long)]
    pub directions: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Checkpoint to load. Relative paths are also looked up in
    /// $OODINV_CHECKPOINT_DIR; without the flag, `$OODINV_CHECKPOINT_DIR/oodinv.ckpt` is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Alignment iterations per level (defaults to the checkpoint's setting).
    #[arg(long = "iters", alias = "n-override")]
    pub iters: Option<usize>,
    /// Replace the feature warp by the identity (masks are still used).
    #[arg(long)]
    pub skip_alignment: bool,
}

#[derive(Args, Debug)]
pub struct InvertArgs {
    /// Input image (PNG); square images are resized to the model resolution.
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EditArgs {
    #[command(flatten)]
    pub invert: InvertArgs,
    /// Name of the editing direction.
    #[arg(long)]
    pub direction: String,
    /// Edit strength.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub strength: f64,
    /// Directory of direction files [default: `directions` next to the checkpoint].
    #[arg(long)]
    pub directions: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Dataset directory (as written by `oodinv data`, or a folder of PNGs).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Where to write the JSON report; the table goes next to it as `.txt`.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Checkpoint to load (same lookup rules as the other commands).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory of direction files [default: `directions` next to the checkpoint].
    #[arg(long)]
    pub directions: Option<PathBuf>,
    /// Address to listen on.
    #[arg(long, default_value = oodinv_service::DEFAULT_ADDR)]
    pub addr: std::net::SocketAddr,
    /// Session lifetime in seconds.
    #[arg(long, default_value_t = 900)]
    pub session_ttl: u64,
}

/// Parses the process arguments, runs the command and maps the outcome to
/// an exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 1 })
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Data(a) => cmd_data(&a, seed.unwrap_or(0)),
        Command::Train(a) => cmd_train(&a, seed),
        Command::Invert(a) => cmd_invert(&a, false),
        Command::Masks(a) => cmd_invert(&a, true),
        Command::Edit(a) => cmd_edit(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Serve(a) => cmd_serve(&a),
        Command::PrintConfig(a) => {
            print!("{}", load_config(&a, seed)?.to_toml());
            Ok(())
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn cmd_data(a: &DataArgs, seed: u64) -> Result<()> {
    if a.count == 0 {
        return Err(invalid("--count must be at least 1"));
    }
    if !(0.0..=1.0).contains(&a.decal_rate) {
        return Err(invalid(format!("--decal-rate must be in [0, 1], got {}", a.decal_rate)));
    }
    if a.resolution < 16 || !a.resolution.is_power_of_two() {
        return Err(invalid(format!("--resolution must be a power of two >= 16, got {}", a.resolution)));
    }
    let samples = make_dataset(a.count, seed, a.decal_rate, a.resolution)?;
    export_dataset(&samples, &a.out)?;
    let decaled = samples.iter().filter(|s| s.has_decal).count();
    println!("wrote {} images ({decaled} with decals) to {}", samples.len(), a.out.display());
    Ok(())
}

pub fn load_config(a: &PresetArgs, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match a.preset {
        Preset::Reference => TrainConfig::reference(),
        Preset::Full => TrainConfig::default(),
    };
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("--config {}: {e}", path.display())))?;
        cfg = cfg.with_overrides(&text)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stages(args: &[StageArg]) -> Vec<Stage> {
    let mut out = Vec::new();
    for s in args {
        match s {
            StageArg::All => out.extend([Stage::A1, Stage::A2, Stage::B]),
            StageArg::A1 => out.push(Stage::A1),
            StageArg::A2 => out.push(Stage::A2),
            StageArg::B => out.push(Stage::B),
        }
    }
    out
}

fn sibling_directions(path: &Path) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join("directions")
}

fn cmd_train(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.preset, seed)?;
    let out = match &a.out {
        Some(out) if !a.print_config => out,
        _ => {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
    };
    let stages = stages(&a.stage);
    let mut ckpt = match &a.resume {
        Some(p) => {
            let path = resolve_checkpoint(Some(p))?;
            Checkpoint::from_bytes(&std::fs::read(&path)?, Some(&cfg.net))?
        }
        None => init_checkpoint(&cfg)?,
    };
    let mut log = match &a.log {
        Some(p) => TrainLog::to_file(p)?,
        None => TrainLog::memory(),
    };
    if a.snapshots {
        log = log.with_snapshots(&out.with_extension("snapshot"));
    }
    for stage in &stages {
        let t = std::time::Instant::now();
        let summary = train_stages(&mut ckpt, &cfg, &[*stage], &mut log)?.remove(0);
        eprintln!("{} done in {:.1}s: {}", stage.name(), t.elapsed().as_secs_f64(), serde_json::Value::Object(summary.metrics));
        ckpt.save(out)?;
    }
    println!("wrote {}", out.display());
    if stages.contains(&Stage::A2) {
        let dir = a.directions.clone().unwrap_or_else(|| sibling_directions(out));
        std::fs::create_dir_all(&dir)?;
        for d in fit_toy_directions(&ckpt.model, DIRECTION_FIT_SAMPLES, oodinv::data::child_seed(cfg.seed, 77))? {
            let path = d.save(&dir)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

/// Resolves the checkpoint flag against $OODINV_CHECKPOINT_DIR.
pub fn resolve_checkpoint(flag: Option<&PathBuf>) -> Result<PathBuf> {
    let env_dir = std::env::var_os(CHECKPOINT_DIR_ENV).map(PathBuf::from);
    let path = match (flag, &env_dir) {
        (Some(p), Some(dir)) if p.is_relative() && !p.exists() => dir.join(p),
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => dir.join(DEFAULT_CHECKPOINT),
        (None, None) => return Err(invalid(format!("missing --checkpoint (or set {CHECKPOINT_DIR_ENV})"))),
    };
    if !path.is_file() {
        return Err(invalid(format!("--checkpoint: no such file {}", path.display())));
    }
    Ok(path)
}

fn validate_model_args(m: &ModelArgs) -> Result<()> {
    if m.iters == Some(0) {
        return Err(invalid("--iters must be at least 1"));
    }
    Ok(())
}

fn load_model(m: &ModelArgs) -> Result<(Checkpoint, PathBuf, SammConfig)> {
    let path = resolve_checkpoint(m.checkpoint.as_ref())?;
    let ckpt = Checkpoint::load(&path)?;
    let mut samm = ckpt.model.samm.cfg.clone();
    if let Some(n) = m.iters {
        samm.iterations = n;
    }
    samm.skip_alignment |= m.skip_alignment;
    Ok((ckpt, path, samm))
}

fn check_input(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(invalid(format!("--image: no such file {}", path.display())));
    }
    Ok(())
}

fn write_masks(model: &Model, inv: &Inversion, out: &Path) -> Result<()> {
    for (r, m) in model.net.align_resolutions.iter().zip(&inv.masks) {
        write_mask(&m.values, &out.join(format!("mask_r{r}.png")))?;
    }
    write_mask(&inv.gathered.values, &out.join("mask_gathered.png"))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v).expect("json serializes") + "\n")?;
    Ok(())
}

fn run_inversion(a: &InvertArgs) -> Result<(Checkpoint, PathBuf, oodinv::nets::ImageTensor, Inversion)> {
    validate_model_args(&a.model)?;
    check_input(&a.image)?;
    let (ckpt, path, samm) = load_model(&a.model)?;
    let x = read_image_at(&a.image, ckpt.model.net.output_resolution)?;
    let inv = ckpt.model.invert_with(&x, &samm)?;
    std::fs::create_dir_all(&a.out)?;
    Ok((ckpt, path, x, inv))
}

fn inversion_record(ckpt: &Checkpoint, x: &oodinv::nets::ImageTensor, inv: &Inversion) -> Result<serde_json::Value> {
    let m = inv.metrics(x);
    Ok(json!({
        "checkpoint_id": ckpt.id()?,
        "iterations": inv.samm.iterations,
        "skip_alignment": inv.samm.skip_alignment,
        "psnr_db": m.psnr_db,
        "ssim": m.ssim,
        "aoa": m.aoa,
        "plain_psnr_db": m.plain_psnr_db,
    }))
}

fn cmd_invert(a: &InvertArgs, masks_only: bool) -> Result<()> {
    let (ckpt, _, x, inv) = run_inversion(a)?;
    write_masks(&ckpt.model, &inv, &a.out)?;
    if !masks_only {
        write_image(&inv.plain, &a.out.join("inversion.png"))?;
        write_image(&inv.blended, &a.out.join("blended.png"))?;
        let rec = inversion_record(&ckpt, &x, &inv)?;
        write_json(&a.out.join(METRICS_FILE), &rec)?;
        println!("PSNR {:.2} dB  SSIM {:.4}  AOA {:.2}%", rec["psnr_db"].as_f64().unwrap(), rec["ssim"].as_f64().unwrap(), 100.0 * rec["aoa"].as_f64().unwrap());
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_edit(a: &EditArgs) -> Result<()> {
    if !a.strength.is_finite() {
        return Err(invalid("--strength must be a finite number"));
    }
    validate_model_args(&a.invert.model)?;
    check_input(&a.invert.image)?;
    let ckpt_path = resolve_checkpoint(a.invert.model.checkpoint.as_ref())?;
    let dir = a.directions.clone().unwrap_or_else(|| sibling_directions(&ckpt_path));
    if !dir.is_dir() {
        return Err(invalid(format!("--directions: no such directory {} (expected *.{DIRECTION_EXT} files)", dir.display())));
    }
    let dirs = load_directions(&dir)?;
    let d = find_direction(&dirs, &a.direction)?.clone();
    let (ckpt, _, x, inv) = run_inversion(&a.invert)?;
    let e = edit_inversion(&ckpt.model, &x, &inv, &d, a.strength)?;
    write_masks(&ckpt.model, &inv, &a.invert.out)?;
    write_image(&inv.plain, &a.invert.out.join("inversion.png"))?;
    write_image(&inv.blended, &a.invert.out.join("blended.png"))?;
    write_image(&e.output, &a.invert.out.join("edited.png"))?;
    let mut rec = inversion_record(&ckpt, &x, &inv)?;
    rec["direction"] = json!(d.name);
    rec["strength"] = json!(a.strength);
    rec["predicted_attribute_before"] = json!(d.predict(&inv.latent));
    rec["predicted_attribute_after"] = json!(d.predict(&e.latent));
    write_json(&a.invert.out.join(METRICS_FILE), &rec)?;
    println!("wrote {}", a.invert.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    validate_model_args(&a.model)?;
    if a.jobs == 0 {
        return Err(invalid("--jobs must be at least 1"));
    }
    if !a.dataset.is_dir() {
        return Err(invalid(format!("--dataset: no such directory {}", a.dataset.display())));
    }
    let samples = load_dataset(&a.dataset)?;
    let path = resolve_checkpoint(a.model.checkpoint.as_ref())?;
    let ckpt = Checkpoint::load(&path)?;
    let opts = EvalOptions { iterations: a.model.iters, skip_alignment: a.model.skip_alignment, jobs: a.jobs, loss: None };
    let report = evaluate(&ckpt.model, &samples, &opts)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&a.out, report.to_json())?;
    let table = report.table();
    std::fs::write(a.out.with_extension("txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_serve(a: &ServeArgs) -> Result<()> {
    if a.session_ttl == 0 {
        return Err(invalid("--session-ttl must be positive"));
    }
    let path = resolve_checkpoint(a.checkpoint.as_ref())?;
    let dir = a.directions.clone().unwrap_or_else(|| sibling_directions(&path));
    let ckpt = Checkpoint::load(&path)?;
    let directions = if dir.is_dir() { load_directions(&dir)? } else { Vec::new() };
    if directions.is_empty() {
        eprintln!("warning: no editing directions in {}", dir.display());
    }
    let cfg = oodinv_service::ServiceConfig { session_ttl: std::time::Duration::from_secs(a.session_ttl), ..Default::default() };
    let state = std::sync::Arc::new(oodinv_service::AppState::new(&ckpt, directions, &cfg)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(oodinv_service::serve(state, a.addr))?;
    Ok(())
}
