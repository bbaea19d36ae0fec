//! Trains all three stages on the toy face data and evaluates the result.
//!
//!     cargo run --release -p oodinv --example train_pipeline -- [scale] [out.ckpt]
//!
//! `scale` multiplies every stage's step budget (default 1.0 = reference).

use std::path::PathBuf;
use std::time::Instant;

use oodinv::train::{eval_set, evaluate, init_checkpoint, train_stages, EvalOptions, Stage, TrainConfig, TrainLog};

fn main() -> oodinv::Result<()> {
    let mut args = std::env::args().skip(1);
    let scale: f64 = args.next().map(|s| s.parse().expect("scale must be a number")).unwrap_or(1.0);
    let out = args.next().map(PathBuf::from);
    let mut cfg = TrainConfig::reference();
    for s in [&mut cfg.a1, &mut cfg.a2, &mut cfg.b] {
        s.steps = ((s.steps as f64 * scale).round() as usize).max(1);
    }
    cfg.log_every = (cfg.b.steps / 10).max(1);

    let mut ckpt = init_checkpoint(&cfg)?;
    let mut log = TrainLog::memory();
    let t = Instant::now();
    for stage in [Stage::A1, Stage::A2, Stage::B] {
        let summary = train_stages(&mut ckpt, &cfg, &[stage], &mut log)?.remove(0);
        println!("{:>3} {:>6.1}s {}", stage.name(), t.elapsed().as_secs_f64(), serde_json::Value::Object(summary.metrics));
    }
    if let Some(path) = out {
        ckpt.save(&path)?;
        println!("saved {}", path.display());
    }
    let report = evaluate(&ckpt.model, &eval_set(&cfg)?, &EvalOptions { jobs: 4, ..Default::default() })?;
    print!("{}", report.table());
    Ok(())
}
