use ndarray::{Array3, Array4, IxDyn};
use oodinv::samm::{iterative_align_var, PinnedMask, SammConfig, SammLevel, StepPredictor};
use oodinv_tensor::gradcheck::{numeric_grad, relative_error};
use oodinv_tensor::init::{randn, rng};
use oodinv_tensor::{backward, Array, Var};

/// Standalone bilinear sampler: out(p) = in(p + d), half-pixel centres,
/// border clamp. `d` is in normalized units (the image spans 2).
fn reference_warp(g: &Array4<f64>, dx: f64, dy: f64) -> Array4<f64> {
    let (n, c, h, w) = g.dim();
    let mut out = Array4::zeros((n, c, h, w));
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let x = (j as f64 + dx * w as f64 / 2.0).clamp(0.0, (w - 1) as f64);
                    let y = (i as f64 + dy * h as f64 / 2.0).clamp(0.0, (h - 1) as f64);
                    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
                    out[[b, ch, i, j]] = (1.0 - fy) * ((1.0 - fx) * g[[b, ch, y0, x0]] + fx * g[[b, ch, y0, x1]])
                        + fy * ((1.0 - fx) * g[[b, ch, y1, x0]] + fx * g[[b, ch, y1, x1]]);
                }
            }
        }
    }
    out
}

/// Plays back fixed (dx, dy, m) per iteration.
struct Scripted(Vec<(f64, f64, f64)>, std::cell::Cell<usize>);

impl StepPredictor for Scripted {
    fn predict(&self, f: &Var, _: &Var) -> oodinv::Result<(Var, Var)> {
        let (n, h, w) = (f.shape()[0], f.shape()[2], f.shape()[3]);
        let (dx, dy, m) = self.0[self.1.get()];
        self.1.set(self.1.get() + 1);
        let mut flow = Array::zeros(IxDyn(&[n, 2, h, w]));
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    flow[[b, 0, i, j]] = dx;
                    flow[[b, 1, i, j]] = dy;
                }
            }
        }
        Ok((Var::constant(flow), Var::full(&[n, 1, h, w], m)))
    }
}

#[test]
fn algorithm_replay_matches_reference_script() {
    let script = vec![(0.1, -0.04, 0.8), (0.05, 0.02, 0.5), (-0.02, 0.07, 0.9)];
    let mut r = rng(21);
    let g4 = randn(&mut r, &[2, 3, 8, 8]).into_dimensionality::<ndarray::Ix4>().unwrap();
    let f = Var::constant(randn(&mut r, &[2, 3, 8, 8]));
    for n_iter in 1..=3 {
        // Reference: accumulate flow and mask, warp the original g each time.
        let (mut dx, mut dy, mut m) = (0.0, 0.0, 0.0);
        let mut g = g4.clone();
        for (j, &(sx, sy, mj)) in script.iter().take(n_iter).enumerate() {
            dx += sx;
            dy += sy;
            m = if j == 0 { mj } else { m * (mj + 1.0 - m) };
            g = reference_warp(&g4, dx, dy) * m + &g4 * (1.0 - m);
        }
        let cfg = SammConfig { iterations: n_iter, ..Default::default() };
        let pred = Scripted(script.clone(), Default::default());
        let out = iterative_align_var(&pred, &f, &Var::constant(g4.clone().into_dyn()), &cfg).unwrap();
        let err = (out.g.value() - &g.into_dyn()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(err <= 1e-6, "N={n_iter}: {err}");
        assert!(out.mask.value().iter().all(|&v| (v - m).abs() <= 1e-12), "N={n_iter}: mask");
        let fl = out.flow.value();
        assert!((fl[[0, 0, 3, 3]] - dx).abs() < 1e-12 && (fl[[1, 1, 5, 2]] - dy).abs() < 1e-12);
    }
    // The N = 2 numbers worked by hand.
    assert!((0.8f64 * (0.5 + 1.0 - 0.8) - 0.56).abs() < 1e-12);
}

#[test]
fn zero_mask_returns_g_exactly() {
    let mut r = rng(22);
    let level = SammLevel::new(8, 4, 8, 0.25, 5);
    let f = Var::constant(randn(&mut r, &[2, 4, 8, 8]));
    let g = Var::constant(randn(&mut r, &[2, 4, 8, 8]));
    for n in 1..=3 {
        let pinned = PinnedMask { inner: &level, value: 0.0 };
        let out = iterative_align_var(&pinned, &f, &g, &SammConfig { iterations: n, ..Default::default() }).unwrap();
        assert_eq!(out.g.value(), g.value());
        assert!(out.flow.value().iter().any(|&v| v != 0.0), "flow head should still move");
    }
}

#[test]
fn zero_flow_full_mask_is_identity() {
    let mut r = rng(23);
    let g = Var::constant(randn(&mut r, &[1, 3, 16, 16]));
    let pred = Scripted(vec![(0.0, 0.0, 1.0); 3], Default::default());
    let out = iterative_align_var(&pred, &g, &g, &SammConfig { iterations: 3, ..Default::default() }).unwrap();
    let err = (out.g.value() - g.value()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(err <= 1e-6);
}

#[test]
fn skip_alignment_keeps_the_identity_warp() {
    let mut r = rng(24);
    let g = Var::constant(randn(&mut r, &[1, 2, 8, 8]));
    let pred = Scripted(vec![(0.2, 0.2, 0.7); 2], Default::default());
    let cfg = SammConfig { iterations: 2, skip_alignment: true, ..Default::default() };
    let out = iterative_align_var(&pred, &g, &g, &cfg).unwrap();
    assert!(out.flow.value().iter().all(|&v| v == 0.0));
    let err = (out.g.value() - g.value()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(err < 1e-12);
}

#[test]
fn predicted_steps_are_bounded() {
    let mut r = rng(25);
    let maxd = 0.25;
    let level = SammLevel::new(8, 3, 8, maxd, 9);
    for trial in 0..1000 {
        let scale = if trial % 10 == 0 { 50.0 } else { 1.0 };
        let f = randn(&mut r, &[3, 8, 8]).mapv(|v| v * scale).into_dimensionality().unwrap();
        let g = randn(&mut r, &[3, 8, 8]).mapv(|v| v * scale).into_dimensionality().unwrap();
        let (dx, dy, m) = level.predict_step(&f, &g).unwrap();
        assert_eq!((dx.dim(), dy.dim(), m.values.dim()), ((8, 8), (8, 8), (8, 8)));
        assert!(dx.iter().chain(dy.iter()).all(|v| v.abs() <= maxd));
        assert!(m.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let bad = Array3::zeros((3, 4, 4));
    assert!(level.predict_step(&bad, &Array3::zeros((3, 8, 8))).is_err());
}

#[test]
fn accumulated_flow_is_bounded() {
    let mut r = rng(26);
    // A large head gain saturates the tanh.
    let mut level = SammLevel::new(8, 3, 8, 0.25, 10);
    let w = level.head.weight.value().mapv(|v| v * 1e3);
    level.head.weight.set_value(w);
    for n in 1..=3 {
        let f = Var::constant(randn(&mut r, &[2, 3, 8, 8]));
        let g = Var::constant(randn(&mut r, &[2, 3, 8, 8]));
        let out = iterative_align_var(&level, &f, &g, &SammConfig { iterations: n, ..Default::default() }).unwrap();
        assert!(out.flow.value().iter().all(|v| v.abs() <= n as f64 * 0.25 + 1e-12));
    }
}

#[test]
fn mask_gradient_matches_finite_differences() {
    let mut r = rng(27);
    let level = SammLevel::new(6, 2, 6, 0.25, 11);
    let f0 = randn(&mut r, &[1, 2, 6, 6]);
    let g = Var::constant(randn(&mut r, &[1, 2, 6, 6]));
    let loss = |f: &Var| level.predict(f, &g).unwrap().1.mean();
    let fv = Var::leaf(f0.clone(), true);
    let grads = backward(&loss(&fv));
    let num = numeric_grad(|v| loss(v).item(), &f0, 1e-5);
    let err = relative_error(grads.get(&fv).unwrap(), &num, 1e-10);
    assert!(err < 1e-3, "relative error {err}");
}
