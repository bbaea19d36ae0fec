//! Hard-edged synthetic occluders with exact masks.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::face::SUPERSAMPLE;
use crate::error::{ensure, Result};
use crate::nets::ImageTensor;

pub const MIN_AREA: f64 = 0.02;
pub const MAX_AREA: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecalShape {
    /// Simple polygon, canvas coordinates.
    Polygon { vertices: Vec<[f64; 2]> },
    /// Polyline of the given width.
    Stroke { points: Vec<[f64; 2]>, width: f64 },
    Ring { center: [f64; 2], outer: f64, inner: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecalSpec {
    pub shape: DecalShape,
    pub color: [f64; 3],
    /// In `(0.5, 1]`.
    pub opacity: f64,
}

fn point_in_polygon(p: [f64; 2], v: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let mut j = v.len() - 1;
    for i in 0..v.len() {
        let (a, b) = (v[i], v[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (qx * qx + qy * qy).sqrt()
}

impl DecalShape {
    fn contains(&self, p: [f64; 2]) -> bool {
        match self {
            DecalShape::Polygon { vertices } => point_in_polygon(p, vertices),
            DecalShape::Stroke { points, width } => {
                points.windows(2).any(|s| segment_distance(p, s[0], s[1]) <= width / 2.0)
            }
            DecalShape::Ring { center, outer, inner } => {
                let d = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt();
                d <= *outer && d >= *inner
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DecalShape::Polygon { vertices } => ensure!(vertices.len() >= 3, Validation, "polygon needs 3 vertices"),
            DecalShape::Stroke { points, width } => {
                ensure!(points.len() >= 2 && *width > 0.0, Validation, "stroke needs 2 points and a positive width")
            }
            DecalShape::Ring { outer, inner, .. } => {
                ensure!(*inner >= 0.0 && outer > inner, Validation, "ring radii must satisfy 0 <= inner < outer")
            }
        }
        Ok(())
    }
}

impl DecalSpec {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        ensure!(self.opacity > 0.5 && self.opacity <= 1.0, Validation, "opacity must be in (0.5, 1], got {}", self.opacity);
        ensure!(self.color.iter().all(|c| (-1.0..=1.0).contains(c)), Validation, "decal color must be within [-1, 1]");
        Ok(())
    }

    /// Binary support: pixels whose subsample coverage is at least one half.
    pub fn rasterize(&self, resolution: usize) -> Array2<f64> {
        let s = SUPERSAMPLE;
        let inv = 1.0 / (resolution * s) as f64;
        Array2::from_shape_fn((resolution, resolution), |(i, j)| {
            let mut hits = 0;
            for si in 0..s {
                for sj in 0..s {
                    let p = [((j * s + sj) as f64 + 0.5) * inv, ((i * s + si) as f64 + 0.5) * inv];
                    hits += self.shape.contains(p) as usize;
                }
            }
            if 2 * hits >= s * s {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Alpha-composites the decal and returns the image with its binary mask.
pub fn paste_decal(image: &ImageTensor, spec: &DecalSpec) -> Result<(ImageTensor, Array2<f64>)> {
    spec.validate()?;
    let r = image.resolution();
    let mask = spec.rasterize(r);
    let area = mask.sum() / (r * r) as f64;
    ensure!(
        (MIN_AREA..=MAX_AREA).contains(&area),
        Validation,
        "decal covers {:.4} of the canvas, outside [{MIN_AREA}, {MAX_AREA}]",
        area
    );
    let mut px = image.pixels().clone();
    for ((i, j), &m) in mask.indexed_iter() {
        if m > 0.0 {
            for c in 0..3 {
                px[[c, i, j]] = px[[c, i, j]] * (1.0 - spec.opacity) + spec.color[c] * spec.opacity;
            }
        }
    }
    Ok((ImageTensor::new(px)?, mask))
}

const PALETTE: [[f64; 3]; 6] =
    [[0.95, -0.9, -0.9], [-0.9, 0.95, -0.9], [-0.9, -0.9, 0.95], [0.95, 0.95, -0.9], [-0.9, 0.95, 0.95], [0.95, -0.9, 0.95]];

fn random_shape(rng: &mut impl Rng) -> DecalShape {
    let center = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
    match rng.random_range(0..3) {
        0 => {
            let k = rng.random_range(3..7);
            let radius = rng.random_range(0.14..0.26);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let vertices = (0..k)
                .map(|i| {
                    let t = phase + std::f64::consts::TAU * i as f64 / k as f64;
                    let r = radius * rng.random_range(0.7..1.0);
                    [center[0] + r * t.cos(), center[1] + r * t.sin()]
                })
                .collect();
            DecalShape::Polygon { vertices }
        }
        1 => {
            let k = rng.random_range(2..5);
            let mut p = center;
            let mut points = vec![p];
            let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
            for _ in 1..k {
                heading += rng.random_range(-1.2..1.2);
                let len = rng.random_range(0.15..0.3);
                p = [(p[0] + len * heading.cos()).clamp(0.05, 0.95), (p[1] + len * heading.sin()).clamp(0.05, 0.95)];
                points.push(p);
            }
            DecalShape::Stroke { points, width: rng.random_range(0.07..0.13) }
        }
        _ => {
            let outer = rng.random_range(0.13..0.22);
            DecalShape::Ring { center, outer, inner: outer * rng.random_range(0.4..0.7) }
        }
    }
}

/// Samples decals until one lands inside the area bounds at `resolution`.
pub fn sample_decal(rng: &mut impl Rng, resolution: usize) -> DecalSpec {
    loop {
        let base = PALETTE[rng.random_range(0..PALETTE.len())];
        let color = base.map(|c: f64| (c + rng.random_range(-0.05..0.05)).clamp(-1.0, 1.0));
        let spec = DecalSpec { shape: random_shape(rng), color, opacity: rng.random_range(0.85..=1.0) };
        let area = spec.rasterize(resolution).sum() / (resolution * resolution) as f64;
        if (0.04..=MAX_AREA).contains(&area) {
            return spec;
        }
    }
}
