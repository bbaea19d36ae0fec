use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Ix2, IxDyn};

use crate::var::{Array, Backward, Var};

pub(crate) fn view2(a: &Array) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected a 2-D array")
}

struct Matmul;
impl Backward for Matmul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, _: &Var, p: &[Var], n: &[bool], g: &Var) -> Vec<Option<Var>> {
        vec![n[0].then(|| g.matmul(&p[1].t())), n[1].then(|| p[0].t().matmul(g))]
    }
}

impl Var {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Var) -> Var {
        let (a, b) = (view2(self.value()), view2(other.value()));
        assert_eq!(a.ncols(), b.nrows(), "matmul: inner dimensions differ");
        let mut c = Array2::<f64>::zeros((a.nrows(), b.ncols()));
        general_mat_mul(1.0, &a, &b, 0.0, &mut c);
        Var::from_op(c.into_dyn(), vec![self.clone(), other.clone()], Matmul)
    }
}

/// Separable linear resampling of the two trailing axes:
/// `y[n, c] = rows * x[n, c] * cols^T`.
struct Resample {
    rows: Array2<f64>,
    cols: Array2<f64>,
}
impl Backward for Resample {
    fn name(&self) -> &'static str {
        "resample"
    }
    fn backward(&self, _: &Var, _: &[Var], _: &[bool], g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.resample(&self.rows.t().to_owned(), &self.cols.t().to_owned()))]
    }
}

fn apply_resample(x: &Array, rows: &Array2<f64>, cols: &Array2<f64>) -> Array {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    assert_eq!(rows.ncols(), h, "resample: row map expects height {}", rows.ncols());
    assert_eq!(cols.ncols(), w, "resample: column map expects width {}", cols.ncols());
    let (ho, wo) = (rows.nrows(), cols.nrows());
    let planes: usize = s[..s.len() - 2].iter().product();
    let mut out_shape = s.to_vec();
    let nd = out_shape.len();
    out_shape[nd - 2] = ho;
    out_shape[nd - 1] = wo;
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    // Width pass for all planes as one product, then the height pass per plane.
    let flat = ArrayView2::from_shape((planes * h, w), xs).unwrap();
    let mut tmp = Array2::<f64>::zeros((planes * h, wo));
    general_mat_mul(1.0, &flat, &cols.t(), 0.0, &mut tmp);
    let mut out = vec![0.0; planes * ho * wo];
    let tmp = tmp.as_slice().unwrap();
    for p in 0..planes {
        let src = ArrayView2::from_shape((h, wo), &tmp[p * h * wo..(p + 1) * h * wo]).unwrap();
        let mut dst = ndarray::ArrayViewMut2::from_shape((ho, wo), &mut out[p * ho * wo..(p + 1) * ho * wo]).unwrap();
        general_mat_mul(1.0, rows, &src, 0.0, &mut dst);
    }
    Array::from_shape_vec(IxDyn(&out_shape), out).unwrap()
}

impl Var {
    /// Applies `rows` (`[h_out, h]`) and `cols` (`[w_out, w]`) to the two
    /// trailing axes.
    pub fn resample(&self, rows: &Array2<f64>, cols: &Array2<f64>) -> Var {
        let value = apply_resample(self.value(), rows, cols);
        Var::from_op(value, vec![self.clone()], Resample { rows: rows.clone(), cols: cols.clone() })
    }

    /// Bilinear resize of the two trailing axes (half-pixel centres, edge clamped).
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Var {
        let s = self.shape();
        let (hi, wi) = (s[s.len() - 2], s[s.len() - 1]);
        if (hi, wi) == (h, w) {
            return self.clone();
        }
        self.resample(&bilinear_matrix(hi, h), &bilinear_matrix(wi, w))
    }

    /// 2x2 average pooling of the two trailing axes.
    pub fn avg_pool2(&self) -> Var {
        let s = self.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        self.resample(&pool2_matrix(h), &pool2_matrix(w))
    }
}

/// Interpolation matrix `[n_out, n_in]` for 1-D bilinear resizing with
/// half-pixel centres and edge clamping.
pub fn bilinear_matrix(n_in: usize, n_out: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n_out, n_in));
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let t = src - i0 as f64;
        m[[i, i0]] += 1.0 - t;
        m[[i, i1]] += t;
    }
    m
}

/// Averaging matrix `[n / 2, n]`.
pub fn pool2_matrix(n: usize) -> Array2<f64> {
    assert!(n % 2 == 0, "pooling needs an even length, got {n}");
    let mut m = Array2::zeros((n / 2, n));
    for i in 0..n / 2 {
        m[[i, 2 * i]] = 0.5;
        m[[i, 2 * i + 1]] = 0.5;
    }
    m
}
