//! Toy face dataset with pasted decals and their exact masks.

mod decal;
mod face;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use decal::{paste_decal, sample_decal, DecalShape, DecalSpec, MAX_AREA, MIN_AREA};
pub use face::{render_toy_face, sample_params, ToyFaceParams, SUPERSAMPLE};

use crate::error::{ensure, Error, Result};
use crate::io::{read_image, read_mask, write_image, write_mask};
use crate::nets::ImageTensor;

/// Attribute names recorded for every sample.
pub const ATTR_SMILE: &str = "smile";
pub const ATTR_EYE_SIZE: &str = "eye_size";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    /// The face before any decal; absent for samples loaded from disk.
    pub clean: Option<ImageTensor>,
    /// 1 where the decal covers the pixel, else 0.
    pub gt_mask: Array2<f64>,
    pub attributes: BTreeMap<String, f64>,
    pub seed: u64,
    pub has_decal: bool,
}

impl Sample {
    pub fn mask_area(&self) -> f64 {
        self.gt_mask.mean().unwrap_or(0.0)
    }
}

/// Independent per-sample seed (splitmix64 of the pair).
pub fn child_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn face_attributes(p: &ToyFaceParams) -> BTreeMap<String, f64> {
    BTreeMap::from([(ATTR_SMILE.to_string(), p.kappa), (ATTR_EYE_SIZE.to_string(), p.eye_radius)])
}

/// One clean face from a seed.
pub fn make_face(seed: u64, resolution: usize) -> Result<(ImageTensor, ToyFaceParams)> {
    let mut rng = oodinv_tensor::init::rng(seed);
    let params = sample_params(&mut rng);
    Ok((render_toy_face(&params, resolution)?, params))
}

/// `n` samples; exactly `round(n * decal_rate)` of them, chosen by a seeded
/// shuffle, carry a decal.
pub fn make_dataset(n: usize, seed: u64, decal_rate: f64, resolution: usize) -> Result<Vec<Sample>> {
    ensure!(n >= 1, Validation, "dataset size must be at least 1");
    ensure!((0.0..=1.0).contains(&decal_rate), Validation, "decal_rate must be in [0, 1], got {decal_rate}");
    let k = (n as f64 * decal_rate).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut oodinv_tensor::init::rng(child_seed(seed, u64::MAX)));
    let mut decaled = vec![false; n];
    for &i in &order[..k] {
        decaled[i] = true;
    }
    (0..n)
        .map(|i| {
            let s = child_seed(seed, i as u64);
            let (clean, params) = make_face(s, resolution)?;
            let (image, gt_mask) = if decaled[i] {
                let mut rng = oodinv_tensor::init::rng(s ^ 0xDECA1);
                paste_decal(&clean, &sample_decal(&mut rng, resolution))?
            } else {
                (clean.clone(), Array2::zeros((resolution, resolution)))
            };
            Ok(Sample { image, clean: Some(clean), gt_mask, attributes: face_attributes(&params), seed: s, has_decal: decaled[i] })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    index: usize,
    image: String,
    mask: String,
    seed: u64,
    has_decal: bool,
    attributes: BTreeMap<String, f64>,
}

pub const METADATA_FILE: &str = "metadata.jsonl";

/// Writes `images/NNNNN.png`, `masks/NNNNN.png` and a `metadata.jsonl`
/// with one record per sample.
pub fn export_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut meta = fs::File::create(dir.join(METADATA_FILE))?;
    for (i, s) in samples.iter().enumerate() {
        let rec = Record {
            index: i,
            image: format!("images/{i:05}.png"),
            mask: format!("masks/{i:05}.png"),
            seed: s.seed,
            has_decal: s.has_decal,
            attributes: s.attributes.clone(),
        };
        write_image(&s.image, &dir.join(&rec.image))?;
        write_mask(&s.gt_mask, &dir.join(&rec.mask))?;
        writeln!(meta, "{}", serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?)?;
    }
    Ok(())
}

/// Reads a directory written by [`export_dataset`]. A plain directory of
/// PNG files is also accepted; its samples then have no masks.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    ensure!(dir.is_dir(), Validation, "dataset directory {} does not exist", dir.display());
    let meta = dir.join(METADATA_FILE);
    if !meta.exists() {
        let mut files: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        ensure!(!files.is_empty(), Validation, "dataset directory {} contains no images", dir.display());
        return files
            .iter()
            .map(|p| {
                let image = read_image(p)?;
                let r = image.resolution();
                Ok(Sample {
                    image,
                    clean: None,
                    gt_mask: Array2::zeros((r, r)),
                    attributes: BTreeMap::new(),
                    seed: 0,
                    has_decal: false,
                })
            })
            .collect();
    }
    let reader = BufReader::new(fs::File::open(&meta)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}: {e}", meta.display())))?;
        let image = read_image(&dir.join(&rec.image))?;
        let gt_mask = read_mask(&dir.join(&rec.mask))?.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        out.push(Sample { image, clean: None, gt_mask, attributes: rec.attributes, seed: rec.seed, has_decal: rec.has_decal });
    }
    ensure!(!out.is_empty(), Validation, "dataset {} is empty", dir.display());
    Ok(out)
}

/// Whether any sample carries ground-truth mask information.
pub fn has_masks(samples: &[Sample]) -> bool {
    samples.iter().any(|s| s.has_decal)
}
