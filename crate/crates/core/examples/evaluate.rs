//! Evaluates a checkpoint on the reference eval set, with and without
//! alignment.
//!
//!     cargo run --release -p oodinv --example evaluate -- [checkpoint]

use std::path::PathBuf;

use oodinv::train::{eval_set, evaluate, Checkpoint, EvalOptions, TrainConfig};

fn main() -> oodinv::Result<()> {
    let ckpt = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "artifacts/reference.ckpt".into()));
    let model = Checkpoint::load(&ckpt)?.model;
    let set = eval_set(&TrainConfig::reference())?;
    for skip_alignment in [false, true] {
        let report = evaluate(&model, &set, &EvalOptions { skip_alignment, jobs: 4, ..Default::default() })?;
        print!("{}", report.table());
        println!();
    }
    Ok(())
}
