//! Inverts one decaled toy face and writes the inversion, the blend and the
//! gathered mask next to the input.
//!
//!     cargo run --release -p oodinv --example invert -- [checkpoint] [out_dir]

use std::path::PathBuf;

use oodinv::io::{write_image, write_mask};
use oodinv::train::{eval_set, Checkpoint, TrainConfig};

fn main() -> oodinv::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = PathBuf::from(args.next().unwrap_or_else(|| "artifacts/reference.ckpt".into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "invert_out".into()));
    let model = Checkpoint::load(&ckpt)?.model;
    let sample = eval_set(&TrainConfig::reference())?.into_iter().find(|s| s.has_decal).expect("eval set has decals");
    let inv = model.invert(&sample.image)?;
    std::fs::create_dir_all(&out)?;
    write_image(&sample.image, &out.join("input.png"))?;
    write_image(&inv.plain, &out.join("inversion.png"))?;
    write_image(&inv.blended, &out.join("blended.png"))?;
    write_mask(&inv.gathered.values, &out.join("mask.png"))?;
    let m = inv.metrics(&sample.image);
    println!("PSNR {:.2} dB (plain {:.2} dB), SSIM {:.3}, AOA {:.3}", m.psnr_db, m.plain_psnr_db, m.ssim, m.aoa);
    println!("wrote {}", out.display());
    Ok(())
}
