use ndarray::{Axis, IxDyn, Slice};

use crate::var::{Array, Backward, Var};

struct Reshape {
    from: Vec<usize>,
}
impl Backward for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _: &Var, _: &[Var], _: &[bool], g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.reshape(&self.from))]
    }
}

struct Permute {
    inverse: Vec<usize>,
}
impl Backward for Permute {
    fn name(&self) -> &'static str {
        "permute"
    }
    fn backward(&self, _: &Var, _: &[Var], _: &[bool], g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.permute(&self.inverse))]
    }
}

struct Narrow {
    axis: usize,
    start: usize,
    full: usize,
}
impl Backward for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn backward(&self, _: &Var, _: &[Var], _: &[bool], g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.embed(self.axis, self.start, self.full))]
    }
}

struct Embed {
    axis: usize,
    start: usize,
    len: usize,
}
impl Backward for Embed {
    fn name(&self) -> &'static str {
        "embed"
    }
    fn backward(&self, _: &Var, _: &[Var], _: &[bool], g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.narrow(self.axis, self.start, self.len))]
    }
}

struct Cat {
    axis: usize,
    sizes: Vec<usize>,
}
impl Backward for Cat {
    fn name(&self) -> &'static str {
        "cat"
    }
    fn backward(&self, _: &Var, _: &[Var], n: &[bool], g: &Var) -> Vec<Option<Var>> {
        let mut start = 0;
        self.sizes
            .iter()
            .zip(n)
            .map(|(&len, &need)| {
                let r = need.then(|| g.narrow(self.axis, start, len));
                start += len;
                r
            })
            .collect()
    }
}

impl Var {
    pub fn reshape(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let value = self
            .value()
            .to_shape(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {:?} into {:?}", self.shape(), shape))
            .to_owned();
        Var::from_op(value, vec![self.clone()], Reshape { from: self.shape().to_vec() })
    }

    /// Flattens everything after the first axis.
    pub fn flatten_from(&self, axis: usize) -> Var {
        let s = self.shape();
        let mut shape = s[..axis].to_vec();
        shape.push(s[axis..].iter().product());
        self.reshape(&shape)
    }

    pub fn permute(&self, axes: &[usize]) -> Var {
        let value = self.value().view().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Var::from_op(value, vec![self.clone()], Permute { inverse })
    }

    /// Transpose of a 2-D value.
    pub fn t(&self) -> Var {
        assert_eq!(self.ndim(), 2);
        self.permute(&[1, 0])
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let full = self.shape()[axis];
        assert!(start + len <= full, "narrow out of range");
        if start == 0 && len == full {
            return self.clone();
        }
        let value = self.value().slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        Var::from_op(value, vec![self.clone()], Narrow { axis, start, full })
    }

    /// Places `self` at `start` along `axis` of a zero array of length `full`.
    pub fn embed(&self, axis: usize, start: usize, full: usize) -> Var {
        let len = self.shape()[axis];
        let mut shape = self.shape().to_vec();
        shape[axis] = full;
        let mut value = Array::zeros(IxDyn(&shape));
        value.slice_axis_mut(Axis(axis), Slice::from(start..start + len)).assign(self.value());
        Var::from_op(value, vec![self.clone()], Embed { axis, start, len })
    }

    pub fn cat(parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("cat: mismatched shapes");
        let sizes = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::from_op(value, parts.to_vec(), Cat { axis, sizes })
    }

    /// Sum over all elements, as a 0-d value.
    pub fn sum(&self) -> Var {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axes`, keeping them as length-1 dimensions.
    pub fn sum_axes(&self, axes: &[usize]) -> Var {
        let mut shape = self.shape().to_vec();
        for &a in axes {
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Var {
        let n: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes(axes).scale(1.0 / n as f64)
    }
}
