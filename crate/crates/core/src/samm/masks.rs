//! Mask recurrences: per-iteration accumulation within a level and
//! gathering across levels.

use ndarray::{Array2, IxDyn};
use oodinv_tensor::Var;

use crate::error::{ensure, Result};

/// Values further than this outside `[0, 1]` indicate a logic error rather
/// than rounding.
pub const RANGE_TOLERANCE: f64 = 1e-5;

/// Invertibility mask of one alignment level.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLevel {
    pub resolution: usize,
    pub values: Array2<f64>,
}

/// Full-resolution mask after gathering all levels.
#[derive(Clone, Debug, PartialEq)]
pub struct GatheredMask {
    pub values: Array2<f64>,
}

fn check_range(name: &str, values: &Array2<f64>) -> Result<()> {
    for &v in values {
        ensure!(
            v.is_finite() && v >= -RANGE_TOLERANCE && v <= 1.0 + RANGE_TOLERANCE,
            Validation,
            "{name} has value {v} outside [0, 1]"
        );
    }
    Ok(())
}

impl MaskLevel {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (h, w) = values.dim();
        ensure!(h == w && h > 0, Structural, "mask must be square, got {h}x{w}");
        check_range("mask", &values)?;
        Ok(MaskLevel { resolution: h, values: values.mapv(|v| v.clamp(0.0, 1.0)) })
    }

    pub fn constant(resolution: usize, c: f64) -> Result<Self> {
        Self::new(Array2::from_elem((resolution, resolution), c))
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }

    /// `[1, 1, r, r]` graph constant.
    pub fn to_var(&self) -> Var {
        mask_var(&self.values)
    }

    /// Splits a `[n, 1, r, r]` value into per-sample masks.
    pub fn from_batch(v: &Var) -> Result<Vec<MaskLevel>> {
        split_batch(v).into_iter().map(MaskLevel::new).collect()
    }
}

impl GatheredMask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (h, w) = values.dim();
        ensure!(h == w && h > 0, Structural, "mask must be square, got {h}x{w}");
        check_range("gathered mask", &values)?;
        Ok(GatheredMask { values: values.mapv(|v| v.clamp(0.0, 1.0)) })
    }

    pub fn constant(resolution: usize, c: f64) -> Result<Self> {
        Self::new(Array2::from_elem((resolution, resolution), c))
    }

    pub fn resolution(&self) -> usize {
        self.values.nrows()
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }

    pub fn to_var(&self) -> Var {
        mask_var(&self.values)
    }

    pub fn from_batch(v: &Var) -> Result<Vec<GatheredMask>> {
        split_batch(v).into_iter().map(GatheredMask::new).collect()
    }
}

fn mask_var(values: &Array2<f64>) -> Var {
    let (h, w) = values.dim();
    Var::constant(values.clone().into_shape_with_order(IxDyn(&[1, 1, h, w])).unwrap())
}

fn split_batch(v: &Var) -> Vec<Array2<f64>> {
    let a = v.value();
    let (h, w) = (a.shape()[2], a.shape()[3]);
    (0..a.shape()[0]).map(|n| Array2::from_shape_fn((h, w), |(i, j)| a[[n, 0, i, j]])).collect()
}

/// The within-level update `M <- M * (m + 1 - M)`, or `m` on the first
/// iteration.
pub fn accumulate_mask(m_new: &MaskLevel, m_prev: &MaskLevel, is_first: bool) -> Result<MaskLevel> {
    ensure!(
        m_new.values.dim() == m_prev.values.dim(),
        Structural,
        "mask shapes differ: {:?} vs {:?}",
        m_new.values.dim(),
        m_prev.values.dim()
    );
    check_range("new mask", &m_new.values)?;
    check_range("previous mask", &m_prev.values)?;
    if is_first {
        return Ok(m_new.clone());
    }
    let mut out = &m_prev.values * &(&m_new.values + 1.0 - &m_prev.values);
    check_range("accumulated mask", &out)?;
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(MaskLevel { resolution: m_prev.resolution, values: out })
}

/// Graph form of [`accumulate_mask`]'s update for `[n, 1, h, w]` masks.
pub fn accumulate_mask_var(m_new: &Var, m_prev: &Var) -> Result<Var> {
    let out = m_prev.mul(&m_new.add_scalar(1.0).sub(m_prev));
    ensure_in_range_var("accumulated mask", &out)?;
    Ok(out.clamp(0.0, 1.0))
}

pub(crate) fn ensure_in_range_var(name: &str, v: &Var) -> Result<()> {
    for &x in v.value() {
        ensure!(
            x.is_finite() && x >= -RANGE_TOLERANCE && x <= 1.0 + RANGE_TOLERANCE,
            Validation,
            "{name} has value {x} outside [0, 1]"
        );
    }
    Ok(())
}

/// Bilinear (half-pixel, edge clamped) upsampling of a mask.
pub fn upsample_mask(m: &MaskLevel, target: usize) -> Result<MaskLevel> {
    ensure!(
        target >= m.resolution,
        Validation,
        "cannot upsample a {0}x{0} mask to {target}x{target}",
        m.resolution
    );
    let n = m.resolution;
    let taps: Vec<(usize, usize, f64)> = (0..target)
        .map(|o| {
            let p = ((o as f64 + 0.5) * n as f64 / target as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = p.floor() as usize;
            (i0, (i0 + 1).min(n - 1), p - i0 as f64)
        })
        .collect();
    // Lerp form a + f (b - a) keeps constant regions exactly constant.
    let lerp = |a: f64, b: f64, f: f64| a + f * (b - a);
    let rows = Array2::from_shape_fn((target, n), |(i, j)| {
        let (a, b, f) = taps[i];
        lerp(m.values[[a, j]], m.values[[b, j]], f)
    });
    let out = Array2::from_shape_fn((target, target), |(i, j)| {
        let (a, b, f) = taps[j];
        lerp(rows[[i, a]], rows[[i, b]], f)
    });
    MaskLevel::new(out)
}

/// Gathers `[n, 1, r_i, r_i]` levels (ascending resolution) into one
/// `[n, 1, target, target]` mask.
pub fn gather_masks_var(levels: &[Var], target: usize) -> Result<Var> {
    ensure!(!levels.is_empty(), Validation, "mask gathering needs at least one level");
    let mut acc: Option<Var> = None;
    for (i, m) in levels.iter().enumerate() {
        let src = m.shape()[2];
        ensure!(target >= src, Validation, "level {i} ({src}x{src}) is larger than the target {target}");
        let up = if src == target { m.clone() } else { m.resize_bilinear(target, target) };
        acc = Some(match acc {
            None => up,
            Some(prev) => prev.mul(&up.sub(&prev).add_scalar(1.0)),
        });
    }
    let out = acc.unwrap();
    ensure_in_range_var("gathered mask", &out)?;
    Ok(out.clamp(0.0, 1.0))
}

/// Gathers per-level masks, lowest resolution first, into an output-size mask.
pub fn gather_masks(levels: &[MaskLevel], target: usize) -> Result<GatheredMask> {
    ensure!(!levels.is_empty(), Validation, "mask gathering needs at least one level");
    let mut acc: Option<Array2<f64>> = None;
    for m in levels {
        let up = upsample_mask(m, target)?.values;
        acc = Some(match acc {
            None => up,
            Some(prev) => &prev * &(&up - &prev + 1.0),
        });
    }
    GatheredMask::new(acc.unwrap())
}
