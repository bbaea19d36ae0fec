use ndarray::IxDyn;
use oodinv_tensor::gradcheck::{numeric_grad, relative_error};
use oodinv_tensor::init::{randn, rng, uniform};
use oodinv_tensor::{backward, bilinear_matrix, grad, Array, Var};

fn check(name: &str, f: impl Fn(&Var) -> Var, x: Array) {
    let leaf = Var::leaf(x.clone(), true);
    let g = backward(&f(&leaf));
    let analytic = g.get(&leaf).cloned().unwrap_or_else(|| Array::zeros(x.raw_dim()));
    let numeric = numeric_grad(|v| f(v).item(), &x, 1e-5);
    let err = relative_error(&analytic, &numeric, 1e-6);
    assert!(err < 1e-6, "{name}: relative error {err}");
}

/// Direct nested-loop correlation with zero padding.
fn naive_conv(x: &Array, w: &Array) -> Array {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let mut y = Array::zeros(IxDyn(&[n, o, h, wd]));
    for ni in 0..n {
        for oi in 0..o {
            for yi in 0..h {
                for xi in 0..wd {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for a in 0..k {
                            for b in 0..k {
                                let sy = yi as isize + a as isize - pad;
                                let sx = xi as isize + b as isize - pad;
                                if sy >= 0 && sx >= 0 && sy < h as isize && sx < wd as isize {
                                    acc += w[[oi, ci, a, b]] * x[[ni, ci, sy as usize, sx as usize]];
                                }
                            }
                        }
                    }
                    y[[ni, oi, yi, xi]] = acc;
                }
            }
        }
    }
    y
}

#[test]
fn conv_matches_nested_loops() {
    let mut r = rng(3);
    for k in [1, 3, 5] {
        let x = randn(&mut r, &[2, 3, 5, 6]);
        let w = randn(&mut r, &[4, 3, k, k]);
        let got = Var::constant(x.clone()).conv2d(&Var::constant(w.clone()));
        let want = naive_conv(&x, &w);
        let err = relative_error(got.value(), &want, 1e-9);
        assert!(err < 1e-12, "k={k}: {err}");
    }
}

#[test]
fn elementwise_gradients() {
    let mut r = rng(0);
    let x = uniform(&mut r, &[3, 4], 0.2, 1.5);
    let b = Var::constant(uniform(&mut r, &[1, 4], 0.5, 1.0));
    check("add", |v| v.add(&b).square().sum(), x.clone());
    check("sub", |v| b.sub(v).square().sum(), x.clone());
    check("mul", |v| v.mul(&b).mul(v).sum(), x.clone());
    check("div", |v| b.div(v).sum(), x.clone());
    check("exp", |v| v.exp().sum(), x.clone());
    check("ln", |v| v.ln().sum(), x.clone());
    check("tanh", |v| v.tanh().square().sum(), x.clone());
    check("sigmoid", |v| v.sigmoid().square().sum(), x.clone());
    check("softplus", |v| v.scale(-3.0).softplus().sum(), x.clone());
    check("powf", |v| v.powf(-0.5).sum(), x.clone());
    check("leaky_relu", |v| v.add_scalar(-0.9).leaky_relu(0.2).square().sum(), x.clone());
    check("minimum", |v| v.minimum(&b).square().sum(), x.clone());
    check("mean_axes", |v| v.mean_axes(&[1]).square().sum(), x.clone());
    check("broadcast", |v| v.sum_axes(&[0]).broadcast_to(&[5, 4]).square().sum(), x.clone());
    check("cat+narrow", |v| Var::cat(&[v.clone(), v.square()], 1).narrow(1, 2, 4).square().sum(), x.clone());
    check("permute+reshape", |v| v.permute(&[1, 0]).reshape(&[2, 6]).narrow(0, 1, 1).sum(), x.clone());
    let m = Var::constant(randn(&mut r, &[4, 2]));
    check("matmul", |v| v.matmul(&m).square().sum(), x);
}

#[test]
fn clamp_passes_gradient_inside_only() {
    let x = Var::leaf(Array::from_shape_vec(IxDyn(&[4]), vec![-2.0, -0.5, 0.5, 2.0]).unwrap(), true);
    let y = x.clamp(-1.0, 1.0);
    assert_eq!(y.to_vec(), vec![-1.0, -0.5, 0.5, 1.0]);
    let g = backward(&y.sum());
    assert_eq!(g.get(&x).unwrap().iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn conv_and_resample_gradients() {
    let mut r = rng(1);
    let x = randn(&mut r, &[2, 2, 4, 4]);
    let w = randn(&mut r, &[3, 2, 3, 3]);
    let wv = Var::constant(w.clone());
    check("conv input", |v| v.conv2d(&wv).square().sum(), x.clone());
    let xv = Var::constant(x.clone());
    check("conv kernel", |v| xv.conv2d(v).square().sum(), w);
    check("avg_pool2", |v| v.avg_pool2().square().sum(), x.clone());
    check("bilinear up", |v| v.resize_bilinear(8, 7).square().sum(), x);
}

#[test]
fn second_order_through_conv() {
    // Differentiate ||d/dx sum(f(x; w))||^2 with respect to w, the shape of
    // a gradient penalty.
    let mut r = rng(2);
    let x = randn(&mut r, &[2, 2, 4, 4]);
    let w0 = randn(&mut r, &[3, 2, 3, 3]).mapv(|v| v * 0.5);
    let w1 = randn(&mut r, &[1, 3, 3, 3]).mapv(|v| v * 0.5);
    let penalty = |w: &Var| -> Var {
        let xin = Var::leaf(x.clone(), true);
        let h = xin.conv2d(w).leaky_relu(0.2).avg_pool2();
        let out = h.conv2d(&Var::constant(w1.clone())).tanh().sum();
        let gx = grad(&out, &[&xin], true).remove(0).unwrap();
        gx.square().sum()
    };
    let wl = Var::leaf(w0.clone(), true);
    let g = backward(&penalty(&wl));
    let analytic = g.get(&wl).unwrap().clone();
    let numeric = numeric_grad(|v| penalty(v).item(), &w0, 1e-5);
    let err = relative_error(&analytic, &numeric, 1e-6);
    assert!(err < 1e-6, "second order relative error {err}");
}

#[test]
fn bilinear_matrix_rows_are_convex() {
    for (a, b) in [(2, 4), (4, 8), (8, 32), (5, 3)] {
        let m = bilinear_matrix(a, b);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn no_grad_builds_no_graph() {
    let x = Var::leaf(Array::ones(IxDyn(&[2])), true);
    let y = oodinv_tensor::no_grad(|| x.square());
    assert!(!y.requires_grad());
    assert!(x.square().requires_grad());
}
