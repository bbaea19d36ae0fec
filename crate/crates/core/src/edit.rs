//! Linear latent directions and the invert → edit → align → blend path.
//!
//! Masks and flows come from the unedited inversion and are reused for the
//! edited synthesis. Re-running alignment against edited features would
//! pull them back toward the input and cancel the edit.

use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nets::{ImageTensor, LatentCode};
use crate::pipeline::{Inversion, Model};
use crate::samm::GatheredMask;

pub const MIN_FIT_SAMPLES: usize = 32;
pub const DIRECTION_EXT: &str = "dir.json";

#[derive(Clone, Debug, PartialEq)]
pub struct EditDirection {
    pub name: String,
    /// Unit Frobenius norm, shaped like a latent code.
    pub direction: Array2<f64>,
    /// Style slots the direction touches; the others are zero.
    pub slots: Vec<usize>,
    pub suggested_range: [f64; 2],
    /// Linear probe: predicted attribute = `offset + gain * <direction, w>`.
    pub gain: f64,
    pub offset: f64,
}

impl EditDirection {
    pub fn new(name: &str, direction: Array2<f64>, slots: Option<Vec<usize>>) -> Result<Self> {
        let slots = slots.unwrap_or_else(|| (0..direction.nrows()).collect());
        ensure!(!slots.is_empty(), Validation, "direction must touch at least one slot");
        ensure!(slots.iter().all(|&s| s < direction.nrows()), Validation, "slot index out of range");
        let mut d = Array2::zeros(direction.raw_dim());
        for &s in &slots {
            d.row_mut(s).assign(&direction.row(s));
        }
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        ensure!(norm.is_finite() && norm > 1e-12, Validation, "direction {name} has zero norm on its slots");
        Ok(EditDirection { name: name.to_string(), direction: d / norm, slots, suggested_range: [-3.0, 3.0], gain: 1.0, offset: 0.0 })
    }

    /// Attribute value predicted by the fitted linear probe.
    pub fn predict(&self, w: &LatentCode) -> f64 {
        self.offset + self.gain * (&self.direction * w.styles()).sum()
    }
}

/// Least-squares regression of the attribute on the flattened latent
/// (restricted to `slots`), normalized to a unit direction.
pub fn fit_direction(samples: &[(LatentCode, f64)], name: &str, slots: Option<Vec<usize>>) -> Result<EditDirection> {
    ensure!(samples.len() >= MIN_FIT_SAMPLES, Validation, "fitting a direction needs at least {MIN_FIT_SAMPLES} samples, got {}", samples.len());
    let (rows, cols) = samples[0].0.styles().dim();
    ensure!(samples.iter().all(|(w, _)| w.styles().dim() == (rows, cols)), Structural, "latent shapes differ");
    ensure!(samples.iter().all(|(_, a)| a.is_finite()), Validation, "attribute values must be finite");
    let slots = slots.unwrap_or_else(|| (0..rows).collect());
    ensure!(!slots.is_empty() && slots.iter().all(|&s| s < rows), Validation, "slot index out of range");
    let n = samples.len();
    let p = slots.len() * cols;

    let a_mean = samples.iter().map(|s| s.1).sum::<f64>() / n as f64;
    let spread = samples.iter().map(|s| (s.1 - a_mean).abs()).fold(0.0, f64::max);
    ensure!(spread > 1e-12 * (1.0 + a_mean.abs()), Validation, "degenerate fit: attribute {name} is constant");

    let flat = |w: &LatentCode| -> Vec<f64> { slots.iter().flat_map(|&s| w.styles().row(s).to_vec()).collect() };
    let mut x = DMatrix::zeros(n, p);
    for (i, (w, _)) in samples.iter().enumerate() {
        for (j, v) in flat(w).into_iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    // Centering removes the intercept; the column means are order-independent.
    let means: Vec<f64> = (0..p).map(|j| x.column(j).sum() / n as f64).collect();
    for j in 0..p {
        x.column_mut(j).add_scalar_mut(-means[j]);
    }
    let y = DVector::from_iterator(n, samples.iter().map(|s| s.1 - a_mean));
    let svd = x.svd(true, true);
    let tol = svd.singular_values.max() * 1e-10 * (n.max(p) as f64);
    let coef = svd.solve(&y, tol).map_err(|e| Error::Validation(format!("degenerate fit: {e}")))?;
    let gain = coef.norm();
    ensure!(gain.is_finite() && gain > 0.0, Validation, "degenerate fit: attribute {name} is not linearly predictable");

    let mut dir = Array2::zeros((rows, cols));
    for (k, &s) in slots.iter().enumerate() {
        for c in 0..cols {
            dir[[s, c]] = coef[k * cols + c] / gain;
        }
    }
    let mean_dot: f64 = (0..p).map(|j| means[j] * coef[j] / gain).sum();

    // The suggested range spans roughly +-2 attribute standard deviations.
    let a_std = (samples.iter().map(|s| (s.1 - a_mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let reach = (2.0 * a_std / gain).clamp(0.5, 3.0);
    let mut d = EditDirection::new(name, dir, Some(slots))?;
    d.gain = gain;
    d.offset = a_mean - gain * mean_dot;
    d.suggested_range = [-reach, reach];
    Ok(d)
}

/// `w + alpha * d`; the direction is zero outside its slots.
pub fn apply_edit(w: &LatentCode, d: &EditDirection, alpha: f64) -> Result<LatentCode> {
    ensure!(
        w.styles().dim() == d.direction.dim(),
        Structural,
        "latent shape {:?} does not match direction {:?}",
        w.styles().dim(),
        d.direction.dim()
    );
    if alpha == 0.0 {
        return Ok(w.clone());
    }
    LatentCode::new(w.styles() + &(&d.direction * alpha))
}

#[derive(Clone, Debug)]
pub struct EditResult {
    pub output: ImageTensor,
    pub mask: GatheredMask,
    /// Generator output for the edited latent, before blending.
    pub x_in_hat: ImageTensor,
    pub latent: LatentCode,
    /// The unedited pass; its per-level masks and flows were reused.
    pub inversion: Inversion,
}

/// Edits an image whose inversion is already available.
pub fn edit_inversion(model: &Model, x: &ImageTensor, inv: &Inversion, d: &EditDirection, alpha: f64) -> Result<EditResult> {
    let latent = apply_edit(&inv.latent, d, alpha)?;
    let (x_in_hat, output) = model.resynthesize(x, inv, &latent)?;
    Ok(EditResult { output, mask: inv.gathered.clone(), x_in_hat, latent, inversion: inv.clone() })
}

pub fn invert_edit_blend(model: &Model, x: &ImageTensor, d: &EditDirection, alpha: f64) -> Result<EditResult> {
    let inv = model.invert(x)?;
    edit_inversion(model, x, &inv, d, alpha)
}

#[derive(Serialize, Deserialize)]
struct DirectionFile {
    name: String,
    shape: [usize; 2],
    slots: Vec<usize>,
    suggested_range: [f64; 2],
    gain: f64,
    offset: f64,
    /// Little-endian f64 values, row-major, base64.
    data: String,
}

impl EditDirection {
    pub fn to_json(&self) -> String {
        let bytes: Vec<u8> = self.direction.iter().flat_map(|v| v.to_le_bytes()).collect();
        let f = DirectionFile {
            name: self.name.clone(),
            shape: [self.direction.nrows(), self.direction.ncols()],
            slots: self.slots.clone(),
            suggested_range: self.suggested_range,
            gain: self.gain,
            offset: self.offset,
            data: STANDARD.encode(bytes),
        };
        serde_json::to_string_pretty(&f).expect("direction serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: DirectionFile = serde_json::from_str(text).map_err(|e| Error::Format(format!("direction file: {e}")))?;
        let bytes = STANDARD.decode(f.data.trim()).map_err(|e| Error::Format(format!("direction {}: {e}", f.name)))?;
        let [r, c] = f.shape;
        ensure!(bytes.len() == r * c * 8, Format, "direction {}: {} bytes for shape {r}x{c}", f.name, bytes.len());
        let values: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let direction = Array2::from_shape_vec((r, c), values).unwrap();
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        ensure!((norm - 1.0).abs() < 1e-6, Format, "direction {} is not unit-norm ({norm})", f.name);
        ensure!(f.slots.iter().all(|&s| s < r), Format, "direction {}: slot out of range", f.name);
        Ok(EditDirection { name: f.name, direction, slots: f.slots, suggested_range: f.suggested_range, gain: f.gain, offset: f.offset })
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.{DIRECTION_EXT}", self.name));
        fs::write(&path, self.to_json())?;
        Ok(path)
    }
}

/// All direction files in `dir`, sorted by name.
pub fn load_directions(dir: &Path) -> Result<Vec<EditDirection>> {
    ensure!(dir.is_dir(), Validation, "directions directory {} does not exist", dir.display());
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(DIRECTION_EXT)) {
            out.push(EditDirection::from_json(&fs::read_to_string(&path)?)?);
        }
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(out)
}

pub fn find_direction<'a>(dirs: &'a [EditDirection], name: &str) -> Result<&'a EditDirection> {
    dirs.iter().find(|d| d.name == name).ok_or_else(|| {
        let names: Vec<&str> = dirs.iter().map(|d| d.name.as_str()).collect();
        Error::Validation(format!("unknown direction {name:?}; available: {}", names.join(", ")))
    })
}

/// Fits the toy-attribute directions ("smile", "eye_size") on encoder
/// latents of freshly rendered faces.
pub fn fit_toy_directions(model: &Model, n: usize, seed: u64) -> Result<Vec<EditDirection>> {
    let r = model.net.output_resolution;
    let faces: Vec<_> = (0..n as u64).map(|i| crate::data::make_face(crate::data::child_seed(seed, i), r)).collect::<Result<_>>()?;
    let images: Vec<ImageTensor> = faces.iter().map(|f| f.0.clone()).collect();
    let mut latents = Vec::with_capacity(n);
    for chunk in images.chunks(16) {
        let x = ImageTensor::stack(chunk);
        let w = oodinv_tensor::no_grad(|| model.encoder.encode_var(&x))?.0;
        latents.extend(LatentCode::unstack(&w)?);
    }
    ["smile", "eye_size"]
        .iter()
        .map(|&name| {
            let samples: Vec<(LatentCode, f64)> =
                latents.iter().zip(&faces).map(|(w, f)| (w.clone(), crate::data::face_attributes(&f.1)[name])).collect();
            fit_direction(&samples, name, None)
        })
        .collect()
}
