//! Bilinear feature warping.
//!
//! Convention: `output(p) = input(p + delta(p))`, where coordinates are
//! normalized so the image spans `[-1, 1]` along each axis with pixel
//! centers at `(2k + 1) / size - 1`. One pixel is therefore `2 / size` in
//! normalized units. Samples falling outside the image are clamped to the
//! border.

use ndarray::{Array2, Array3, IxDyn};
use oodinv_tensor::{Array, Backward, Var};

use crate::error::{ensure, Result};

/// Per-level displacement in normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub dx: Array2<f64>,
    pub dy: Array2<f64>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField { dx: Array2::zeros((h, w)), dy: Array2::zeros((h, w)) }
    }

    /// Largest absolute displacement along either axis.
    pub fn max_abs(&self) -> f64 {
        self.dx.iter().chain(self.dy.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `[1, 2, h, w]` graph constant (x first).
    pub fn to_var(&self) -> Var {
        let (h, w) = self.dx.dim();
        let mut a = Array::zeros(IxDyn(&[1, 2, h, w]));
        for ((i, j), v) in self.dx.indexed_iter() {
            a[[0, 0, i, j]] = *v;
            a[[0, 1, i, j]] = self.dy[[i, j]];
        }
        Var::constant(a)
    }

    /// Splits a `[n, 2, h, w]` value into per-sample fields.
    pub fn from_batch(v: &Var) -> Vec<FlowField> {
        let a = v.value();
        (0..a.shape()[0])
            .map(|n| {
                let (h, w) = (a.shape()[2], a.shape()[3]);
                FlowField {
                    dx: Array2::from_shape_fn((h, w), |(i, j)| a[[n, 0, i, j]]),
                    dy: Array2::from_shape_fn((h, w), |(i, j)| a[[n, 1, i, j]]),
                }
            })
            .collect()
    }
}

/// Source coordinate along one axis and whether the border clamp engaged.
#[inline]
fn source(k: usize, delta: f64, size: usize) -> (f64, bool) {
    let p = k as f64 + delta * size as f64 / 2.0;
    let hi = (size - 1) as f64;
    if p < 0.0 {
        (0.0, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

/// Left tap, right tap and the weight of the right tap.
#[inline]
fn taps(p: f64, size: usize) -> (usize, usize, f64) {
    let i0 = (p.floor() as usize).min(size - 1);
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, p - i0 as f64)
}

struct Sample {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// d(source px)/d(delta_x), zero when clamped; likewise for y.
    jx: f64,
    jy: f64,
}

fn plan(flow: &[f64], n: usize, h: usize, w: usize) -> Vec<Sample> {
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for ni in 0..n {
        let fx_plane = &flow[(ni * 2) * hw..(ni * 2 + 1) * hw];
        let fy_plane = &flow[(ni * 2 + 1) * hw..(ni * 2 + 2) * hw];
        for i in 0..h {
            for j in 0..w {
                let (px, cx) = source(j, fx_plane[i * w + j], w);
                let (py, cy) = source(i, fy_plane[i * w + j], h);
                let (x0, x1, fx) = taps(px, w);
                let (y0, y1, fy) = taps(py, h);
                out.push(Sample {
                    x0,
                    x1,
                    y0,
                    y1,
                    fx,
                    fy,
                    jx: if cx { 0.0 } else { w as f64 / 2.0 },
                    jy: if cy { 0.0 } else { h as f64 / 2.0 },
                });
            }
        }
    }
    out
}

fn dims(feature: &Array) -> (usize, usize, usize, usize) {
    let s = feature.shape();
    (s[0], s[1], s[2], s[3])
}

fn forward(feature: &Array, flow: &Array) -> Array {
    let (n, c, h, w) = dims(feature);
    let fs = feature.as_standard_layout();
    let fs = fs.as_slice().unwrap();
    let fl = flow.as_standard_layout();
    let samples = plan(fl.as_slice().unwrap(), n, h, w);
    let hw = h * w;
    let mut out = vec![0.0; n * c * hw];
    for ni in 0..n {
        for ci in 0..c {
            let src = &fs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            let dst = &mut out[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            for (k, s) in samples[ni * hw..(ni + 1) * hw].iter().enumerate() {
                let top = src[s.y0 * w + s.x0] * (1.0 - s.fx) + src[s.y0 * w + s.x1] * s.fx;
                let bot = src[s.y1 * w + s.x0] * (1.0 - s.fx) + src[s.y1 * w + s.x1] * s.fx;
                dst[k] = top * (1.0 - s.fy) + bot * s.fy;
            }
        }
    }
    Array::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap()
}

/// Gradients for feature and flow given the output gradient.
fn adjoint(feature: &Array, flow: &Array, grad: &Array, want_feature: bool, want_flow: bool) -> (Option<Array>, Option<Array>) {
    let (n, c, h, w) = dims(feature);
    let fs = feature.as_standard_layout();
    let fs = fs.as_slice().unwrap();
    let gs = grad.as_standard_layout();
    let gs = gs.as_slice().unwrap();
    let fl = flow.as_standard_layout();
    let samples = plan(fl.as_slice().unwrap(), n, h, w);
    let hw = h * w;
    let mut d_feat = if want_feature { vec![0.0; n * c * hw] } else { Vec::new() };
    let mut d_flow = if want_flow { vec![0.0; n * 2 * hw] } else { Vec::new() };
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            let src = &fs[off..off + hw];
            let g = &gs[off..off + hw];
            for (k, s) in samples[ni * hw..(ni + 1) * hw].iter().enumerate() {
                let gk = g[k];
                if want_feature {
                    let d = &mut d_feat[off..off + hw];
                    d[s.y0 * w + s.x0] += gk * (1.0 - s.fx) * (1.0 - s.fy);
                    d[s.y0 * w + s.x1] += gk * s.fx * (1.0 - s.fy);
                    d[s.y1 * w + s.x0] += gk * (1.0 - s.fx) * s.fy;
                    d[s.y1 * w + s.x1] += gk * s.fx * s.fy;
                }
                if want_flow {
                    let (v00, v01) = (src[s.y0 * w + s.x0], src[s.y0 * w + s.x1]);
                    let (v10, v11) = (src[s.y1 * w + s.x0], src[s.y1 * w + s.x1]);
                    let dpx = (v01 - v00) * (1.0 - s.fy) + (v11 - v10) * s.fy;
                    let top = v00 * (1.0 - s.fx) + v01 * s.fx;
                    let bot = v10 * (1.0 - s.fx) + v11 * s.fx;
                    let dpy = bot - top;
                    d_flow[(ni * 2) * hw + k] += gk * dpx * s.jx;
                    d_flow[(ni * 2 + 1) * hw + k] += gk * dpy * s.jy;
                }
            }
        }
    }
    let wrap = |v: Vec<f64>, shape: &[usize]| Array::from_shape_vec(IxDyn(shape), v).unwrap();
    (
        want_feature.then(|| wrap(d_feat, &[n, c, h, w])),
        want_flow.then(|| wrap(d_flow, &[n, 2, h, w])),
    )
}

/// First-order only: the returned gradients are graph constants.
struct GridSample;
impl Backward for GridSample {
    fn name(&self) -> &'static str {
        "grid_sample"
    }
    fn backward(&self, _: &Var, p: &[Var], needs: &[bool], g: &Var) -> Vec<Option<Var>> {
        let (df, dflow) = adjoint(p[0].value(), p[1].value(), g.value(), needs[0], needs[1]);
        vec![df.map(Var::constant), dflow.map(Var::constant)]
    }
}

/// Warps `feature` (`[n, c, h, w]`) by `flow` (`[n, 2, h, w]`, x then y).
/// Differentiable with respect to both arguments.
pub fn grid_sample_var(feature: &Var, flow: &Var) -> Result<Var> {
    ensure!(feature.ndim() == 4, Structural, "grid_sample expects a [n, c, h, w] feature, got {:?}", feature.shape());
    let (n, h, w) = (feature.shape()[0], feature.shape()[2], feature.shape()[3]);
    ensure!(
        flow.shape() == [n, 2, h, w],
        Structural,
        "flow has shape {:?}, expected [{n}, 2, {h}, {w}]",
        flow.shape()
    );
    ensure!(flow.value().iter().all(|v| v.is_finite()), Validation, "flow contains non-finite values");
    let value = forward(feature.value(), flow.value());
    Ok(Var::from_op(value, vec![feature.clone(), flow.clone()], GridSample))
}

/// Warps one `[c, h, w]` feature map.
pub fn grid_sample(feature: &Array3<f64>, flow: &FlowField) -> Result<Array3<f64>> {
    let (c, h, w) = feature.dim();
    ensure!(
        flow.dx.dim() == (h, w) && flow.dy.dim() == (h, w),
        Structural,
        "flow is {:?}, feature is {h}x{w}",
        flow.dx.dim()
    );
    let f = Var::constant(feature.clone().into_shape_with_order(IxDyn(&[1, c, h, w])).unwrap());
    let out = grid_sample_var(&f, &flow.to_var())?;
    Ok(out.value().clone().into_shape_with_order((c, h, w)).unwrap())
}
