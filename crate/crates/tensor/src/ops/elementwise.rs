use ndarray::{Axis, IxDyn, Zip};

use crate::var::{Array, Backward, Var};

/// Result shape of numpy-style broadcasting.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
            }
        })
        .collect()
}

/// Sums `a` down to `shape`, undoing a broadcast.
pub(crate) fn sum_to_array(a: &Array, shape: &[usize]) -> Array {
    if a.shape() == shape {
        return a.clone();
    }
    let lead = a.ndim() - shape.len();
    let mut out = a.clone();
    for _ in 0..lead {
        out = out.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[i] != 1 {
            out = out.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    out
}

fn broadcast_array(a: &Array, shape: &[usize]) -> Array {
    a.broadcast(IxDyn(shape)).expect("broadcast_to: incompatible shape").to_owned()
}

struct BroadcastTo {
    from: Vec<usize>,
}
impl Backward for BroadcastTo {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
    fn backward(&self, _: &Var, _: &[Var], _: &[bool], g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.sum_to(&self.from))]
    }
}

struct SumTo {
    from: Vec<usize>,
}
impl Backward for SumTo {
    fn name(&self) -> &'static str {
        "sum_to"
    }
    fn backward(&self, _: &Var, _: &[Var], _: &[bool], g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.broadcast_to(&self.from))]
    }
}

struct AddOp;
impl Backward for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &Var, p: &[Var], n: &[bool], g: &Var) -> Vec<Option<Var>> {
        vec![n[0].then(|| g.sum_to(p[0].shape())), n[1].then(|| g.sum_to(p[1].shape()))]
    }
}

struct SubOp;
impl Backward for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &Var, p: &[Var], n: &[bool], g: &Var) -> Vec<Option<Var>> {
        vec![n[0].then(|| g.sum_to(p[0].shape())), n[1].then(|| g.neg().sum_to(p[1].shape()))]
    }
}

struct MulOp;
impl Backward for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, _: &Var, p: &[Var], n: &[bool], g: &Var) -> Vec<Option<Var>> {
        vec![
            n[0].then(|| g.mul(&p[1]).sum_to(p[0].shape())),
            n[1].then(|| g.mul(&p[0]).sum_to(p[1].shape())),
        ]
    }
}

struct DivOp;
impl Backward for DivOp {
    fn name(&self) -> &'static str {
        "div"
    }
    fn backward(&self, out: &Var, p: &[Var], n: &[bool], g: &Var) -> Vec<Option<Var>> {
        vec![
            n[0].then(|| g.div(&p[1]).sum_to(p[0].shape())),
            n[1].then(|| g.mul(out).div(&p[1]).neg().sum_to(p[1].shape())),
        ]
    }
}

/// Multiplication by a fixed array; also the backward rule of every
/// piecewise-linear activation.
struct MulConst {
    factor: Array,
}
impl Backward for MulConst {
    fn name(&self) -> &'static str {
        "mul_const"
    }
    fn backward(&self, _: &Var, p: &[Var], _: &[bool], g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.mul_const(&self.factor).sum_to(p[0].shape()))]
    }
}

struct Scale(f64);
impl Backward for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &Var, _: &[Var], _: &[bool], g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.scale(self.0))]
    }
}

struct AddScalar;
impl Backward for AddScalar {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, _: &Var, _: &[Var], _: &[bool], g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.clone())]
    }
}

struct ExpOp;
impl Backward for ExpOp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward(&self, out: &Var, _: &[Var], _: &[bool], g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.mul(out))]
    }
}

struct LnOp;
impl Backward for LnOp {
    fn name(&self) -> &'static str {
        "ln"
    }
    fn backward(&self, _: &Var, p: &[Var], _: &[bool], g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.div(&p[0]))]
    }
}

struct TanhOp;
impl Backward for TanhOp {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn backward(&self, out: &Var, _: &[Var], _: &[bool], g: &Var) -> Vec<Option<Var>> {
        let d = out.square().neg().add_scalar(1.0);
        vec![Some(g.mul(&d))]
    }
}

struct SigmoidOp;
impl Backward for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, out: &Var, _: &[Var], _: &[bool], g: &Var) -> Vec<Option<Var>> {
        let d = out.mul(&out.neg().add_scalar(1.0));
        vec![Some(g.mul(&d))]
    }
}

struct SoftplusOp;
impl Backward for SoftplusOp {
    fn name(&self) -> &'static str {
        "softplus"
    }
    fn backward(&self, _: &Var, p: &[Var], _: &[bool], g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.mul(&p[0].sigmoid()))]
    }
}

struct PowfOp(f64);
impl Backward for PowfOp {
    fn name(&self) -> &'static str {
        "powf"
    }
    fn backward(&self, _: &Var, p: &[Var], _: &[bool], g: &Var) -> Vec<Option<Var>> {
        let d = if self.0 == 2.0 { p[0].scale(2.0) } else { p[0].powf(self.0 - 1.0).scale(self.0) };
        vec![Some(g.mul(&d))]
    }
}

struct MinimumOp {
    left: Array,
}
impl Backward for MinimumOp {
    fn name(&self) -> &'static str {
        "minimum"
    }
    fn backward(&self, _: &Var, p: &[Var], n: &[bool], g: &Var) -> Vec<Option<Var>> {
        let right = self.left.mapv(|m| 1.0 - m);
        vec![
            n[0].then(|| g.mul_const(&self.left).sum_to(p[0].shape())),
            n[1].then(|| g.mul_const(&right).sum_to(p[1].shape())),
        ]
    }
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Var {
    fn binary(&self, other: &Var, f: impl Fn(f64, f64) -> f64 + Sync + Send, op: impl Backward + 'static) -> Var {
        let (a, b) = (self.value(), other.value());
        let value = if a.shape() == b.shape() {
            let mut out = a.clone();
            Zip::from(&mut out).and(b).for_each(|x, &y| *x = f(*x, y));
            out
        } else {
            let shape = broadcast_shape(a.shape(), b.shape());
            let mut out = broadcast_array(a, &shape);
            let bb = b.broadcast(IxDyn(&shape)).unwrap();
            Zip::from(&mut out).and(&bb).for_each(|x, &y| *x = f(*x, y));
            out
        };
        Var::from_op(value, vec![self.clone(), other.clone()], op)
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: impl Backward + 'static) -> Var {
        Var::from_op(self.value().mapv(f), vec![self.clone()], op)
    }

    pub fn add(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a + b, AddOp)
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a - b, SubOp)
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a * b, MulOp)
    }

    pub fn div(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a / b, DivOp)
    }

    /// Elementwise minimum. Ties route the gradient to `self`.
    pub fn minimum(&self, other: &Var) -> Var {
        let shape = broadcast_shape(self.shape(), other.shape());
        let a = broadcast_array(self.value(), &shape);
        let b = broadcast_array(other.value(), &shape);
        let mut left = Array::zeros(IxDyn(&shape));
        let mut value = Array::zeros(IxDyn(&shape));
        Zip::from(&mut value).and(&mut left).and(&a).and(&b).for_each(|v, l, &x, &y| {
            if x <= y {
                *v = x;
                *l = 1.0;
            } else {
                *v = y;
            }
        });
        Var::from_op(value, vec![self.clone(), other.clone()], MinimumOp { left })
    }

    /// Multiplies by a constant array (broadcasting allowed).
    pub fn mul_const(&self, factor: &Array) -> Var {
        let shape = broadcast_shape(self.shape(), factor.shape());
        let mut value = broadcast_array(self.value(), &shape);
        let fb = factor.broadcast(IxDyn(&shape)).unwrap();
        Zip::from(&mut value).and(&fb).for_each(|x, &f| *x *= f);
        Var::from_op(value, vec![self.clone()], MulConst { factor: factor.clone() })
    }

    pub fn scale(&self, s: f64) -> Var {
        self.unary(|x| x * s, Scale(s))
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        self.unary(|x| x + s, AddScalar)
    }

    pub fn exp(&self) -> Var {
        self.unary(f64::exp, ExpOp)
    }

    pub fn ln(&self) -> Var {
        self.unary(f64::ln, LnOp)
    }

    pub fn tanh(&self) -> Var {
        self.unary(f64::tanh, TanhOp)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(stable_sigmoid, SigmoidOp)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var {
        self.unary(stable_softplus, SoftplusOp)
    }

    pub fn powf(&self, p: f64) -> Var {
        if p == 2.0 {
            return self.square();
        }
        self.unary(|x| x.powf(p), PowfOp(p))
    }

    pub fn square(&self) -> Var {
        self.unary(|x| x * x, PowfOp(2.0))
    }

    pub fn sqrt(&self) -> Var {
        self.powf(0.5)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let factor = self.value().mapv(|x| if x >= 0.0 { 1.0 } else { slope });
        self.mul_const(&factor)
    }

    /// Rectifier with derivative 0 at the kink.
    pub fn relu(&self) -> Var {
        let factor = self.value().mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.mul_const(&factor)
    }

    /// Clamps into `[lo, hi]`; the gradient passes where the input is inside
    /// the closed interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let inside = self.value().mapv(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 });
        let value = self.value().mapv(|x| x.clamp(lo, hi));
        // value = x * inside + clamp(x) * (1 - inside); only the first part varies.
        let outside = Zip::from(&value).and(&inside).map_collect(|&v, &i| v * (1.0 - i));
        let lin = self.mul_const(&inside);
        if outside.iter().all(|&o| o == 0.0) {
            lin
        } else {
            lin.add(&Var::constant(outside))
        }
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let value = broadcast_array(self.value(), shape);
        Var::from_op(value, vec![self.clone()], BroadcastTo { from: self.shape().to_vec() })
    }

    /// Sums away broadcast dimensions so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let value = sum_to_array(self.value(), shape);
        Var::from_op(value, vec![self.clone()], SumTo { from: self.shape().to_vec() })
    }
}

impl std::ops::Add for &Var {
    type Output = Var;
    fn add(self, rhs: &Var) -> Var {
        Var::add(self, rhs)
    }
}

impl std::ops::Sub for &Var {
    type Output = Var;
    fn sub(self, rhs: &Var) -> Var {
        Var::sub(self, rhs)
    }
}

impl std::ops::Mul for &Var {
    type Output = Var;
    fn mul(self, rhs: &Var) -> Var {
        Var::mul(self, rhs)
    }
}

impl std::ops::Mul<f64> for &Var {
    type Output = Var;
    fn mul(self, rhs: f64) -> Var {
        self.scale(rhs)
    }
}

impl std::ops::Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}
