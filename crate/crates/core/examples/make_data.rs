//! Generates a small decaled toy-face set and writes it as PNGs plus masks.
//!
//!     cargo run --release -p oodinv --example make_data -- [out_dir] [n]

use std::path::PathBuf;

use oodinv::data::{export_dataset, make_dataset};

fn main() -> oodinv::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "toy_faces".into()));
    let n: usize = args.next().map(|s| s.parse().expect("n must be an integer")).unwrap_or(16);
    let samples = make_dataset(n, 0, 0.7, 32)?;
    export_dataset(&samples, &out)?;
    let decaled: Vec<_> = samples.iter().filter(|s| s.has_decal).collect();
    let area = decaled.iter().map(|s| s.mask_area()).sum::<f64>() / decaled.len().max(1) as f64;
    println!("wrote {n} images to {} ({} decaled, mean decal area {area:.3})", out.display(), decaled.len());
    Ok(())
}
