//! Sweeps an edit direction over a range of strengths and writes one
//! edited image per strength.
//!
//!     cargo run --release -p oodinv --example edit -- [checkpoint] [directions_dir] [direction] [out_dir]

use std::path::PathBuf;

use oodinv::edit::{edit_inversion, find_direction, load_directions};
use oodinv::io::write_image;
use oodinv::train::{eval_set, Checkpoint, TrainConfig};

fn main() -> oodinv::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = PathBuf::from(args.next().unwrap_or_else(|| "artifacts/reference.ckpt".into()));
    let dirs = PathBuf::from(args.next().unwrap_or_else(|| "artifacts/directions".into()));
    let name = args.next().unwrap_or_else(|| "smile".into());
    let out = PathBuf::from(args.next().unwrap_or_else(|| "edit_out".into()));
    let model = Checkpoint::load(&ckpt)?.model;
    let directions = load_directions(&dirs)?;
    let d = find_direction(&directions, &name)?;
    let x = eval_set(&TrainConfig::reference())?.remove(0).image;
    let inv = model.invert(&x)?;
    std::fs::create_dir_all(&out)?;
    for alpha in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        let e = edit_inversion(&model, &x, &inv, d, alpha)?;
        write_image(&e.output, &out.join(format!("{name}_{alpha:+.1}.png")))?;
        println!("{name} {alpha:+.1}: predicted attribute {:.3}", d.predict(&e.latent));
    }
    Ok(())
}
