//! Procedural toy faces on a unit canvas (`x` right, `y` down, both in
//! `[0, 1]`).

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nets::ImageTensor;

/// Subsamples per pixel along each axis.
pub const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyFaceParams {
    pub background: [f64; 3],
    pub face_center: [f64; 2],
    /// Horizontal and vertical semi-axes.
    pub face_axes: [f64; 2],
    pub face_color: [f64; 3],
    pub eye_centers: [[f64; 2]; 2],
    pub eye_radius: f64,
    pub eye_color: [f64; 3],
    pub mouth_center: [f64; 2],
    /// Half the mouth width.
    pub mouth_half_width: f64,
    /// Mouth curvature in `[-1, 1]`; positive lifts the corners.
    pub kappa: f64,
    /// Vertical extent of the curve at `|kappa| = 1`.
    pub mouth_amplitude: f64,
    pub mouth_thickness: f64,
    pub mouth_color: [f64; 3],
}

fn in_ellipse(p: [f64; 2], c: [f64; 2], ax: [f64; 2]) -> f64 {
    let dx = (p[0] - c[0]) / ax[0];
    let dy = (p[1] - c[1]) / ax[1];
    dx * dx + dy * dy
}

fn color_ok(c: &[f64; 3]) -> bool {
    c.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v))
}

impl ToyFaceParams {
    pub fn validate(&self) -> Result<()> {
        let [cx, cy] = self.face_center;
        let [a, b] = self.face_axes;
        ensure!(a >= 0.05 && b >= 0.05, Validation, "face semi-axes must be at least 0.05, got ({a}, {b})");
        ensure!(
            cx - a >= 0.0 && cx + a <= 1.0 && cy - b >= 0.0 && cy + b <= 1.0,
            Validation,
            "face ellipse leaves the canvas"
        );
        for c in [&self.background, &self.face_color, &self.eye_color, &self.mouth_color] {
            ensure!(color_ok(c), Validation, "colors must be finite and within [-1, 1]");
        }
        ensure!(self.eye_radius > 0.0, Validation, "eye radius must be positive");
        for e in &self.eye_centers {
            // The whole eye disk must sit inside the face.
            let grown = [a - self.eye_radius, b - self.eye_radius];
            ensure!(
                grown[0] > 0.0 && grown[1] > 0.0 && in_ellipse(*e, self.face_center, grown) <= 1.0,
                Validation,
                "eye at ({}, {}) is not inside the face",
                e[0],
                e[1]
            );
        }
        ensure!((-1.0..=1.0).contains(&self.kappa), Validation, "kappa must be in [-1, 1], got {}", self.kappa);
        ensure!(
            self.mouth_half_width > 0.0 && self.mouth_thickness > 0.0 && self.mouth_amplitude >= 0.0,
            Validation,
            "mouth dimensions must be positive"
        );
        let [mx, my] = self.mouth_center;
        let reach = self.mouth_amplitude / 2.0 + self.mouth_thickness;
        for corner in [[mx - self.mouth_half_width, my], [mx + self.mouth_half_width, my], [mx, my - reach], [mx, my + reach]] {
            ensure!(in_ellipse(corner, self.face_center, self.face_axes) <= 1.0, Validation, "mouth leaves the face");
        }
        Ok(())
    }

    /// Color at a canvas point, painting back to front.
    fn shade(&self, p: [f64; 2]) -> [f64; 3] {
        if in_ellipse(p, self.face_center, self.face_axes) > 1.0 {
            return self.background;
        }
        for e in &self.eye_centers {
            let (dx, dy) = (p[0] - e[0], p[1] - e[1]);
            if dx * dx + dy * dy <= self.eye_radius * self.eye_radius {
                return self.eye_color;
            }
        }
        let u = (p[0] - self.mouth_center[0]) / self.mouth_half_width;
        if u.abs() <= 1.0 {
            let curve = self.mouth_center[1] + self.kappa * self.mouth_amplitude * (0.5 - u * u);
            if (p[1] - curve).abs() <= self.mouth_thickness / 2.0 {
                return self.mouth_color;
            }
        }
        self.face_color
    }
}

/// Renders with `SUPERSAMPLE x SUPERSAMPLE` box-filtered subsamples.
pub fn render_toy_face(params: &ToyFaceParams, resolution: usize) -> Result<ImageTensor> {
    params.validate()?;
    let s = SUPERSAMPLE;
    let inv = 1.0 / (resolution * s) as f64;
    let mut px = Array3::zeros((3, resolution, resolution));
    for i in 0..resolution {
        for j in 0..resolution {
            let mut acc = [0.0; 3];
            for si in 0..s {
                for sj in 0..s {
                    let p = [((j * s + sj) as f64 + 0.5) * inv, ((i * s + si) as f64 + 0.5) * inv];
                    let c = params.shade(p);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                px[[k, i, j]] = acc[k] / (s * s) as f64;
            }
        }
    }
    ImageTensor::new(px)
}

fn pick(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Draws face parameters from fixed uniform ranges; `kappa` is uniform on
/// `[-1, 1]`, the eye radius on `[0.04, 0.08]`.
pub fn sample_params(rng: &mut impl Rng) -> ToyFaceParams {
    let gray = pick(rng, -0.5, 0.2);
    let background = [gray + pick(rng, -0.12, 0.12), gray + pick(rng, -0.12, 0.12), gray + pick(rng, -0.12, 0.12)];
    let face_center = [pick(rng, 0.46, 0.54), pick(rng, 0.47, 0.53)];
    let face_axes = [pick(rng, 0.30, 0.36), pick(rng, 0.36, 0.42)];
    let face_color = [pick(rng, 0.35, 0.75), pick(rng, 0.0, 0.35), pick(rng, -0.35, 0.0)];
    let eye_dx = face_axes[0] * pick(rng, 0.36, 0.46);
    let eye_y = face_center[1] - face_axes[1] * pick(rng, 0.2, 0.3);
    let eye_radius = pick(rng, 0.04, 0.08);
    let eye_color = [pick(rng, -0.9, -0.6), pick(rng, -0.9, -0.6), pick(rng, -0.8, -0.4)];
    let mouth_center = [face_center[0], face_center[1] + face_axes[1] * pick(rng, 0.38, 0.46)];
    let kappa = pick(rng, -1.0, 1.0);
    ToyFaceParams {
        background,
        face_center,
        face_axes,
        face_color,
        eye_centers: [[face_center[0] - eye_dx, eye_y], [face_center[0] + eye_dx, eye_y]],
        eye_radius,
        eye_color,
        mouth_center,
        mouth_half_width: face_axes[0] * pick(rng, 0.4, 0.55),
        kappa,
        mouth_amplitude: 0.12,
        mouth_thickness: 0.05,
        mouth_color: [pick(rng, 0.0, 0.3), pick(rng, -0.9, -0.6), pick(rng, -0.8, -0.5)],
    }
}
