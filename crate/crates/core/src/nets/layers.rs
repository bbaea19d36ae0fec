//! Equalized-learning-rate layers and the modulated convolution.

use ndarray::IxDyn;
use oodinv_tensor::init::{randn, Rng64};
use oodinv_tensor::{join, Array, Module, Param, Var};

pub(crate) const LRELU_SLOPE: f64 = 0.2;
pub(crate) const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Leaky rectifier rescaled to keep unit variance.
pub(crate) fn act(x: &Var) -> Var {
    x.leaky_relu(LRELU_SLOPE).scale(LRELU_GAIN)
}

/// Fully connected layer whose weights are stored at unit scale and
/// rescaled on every forward pass.
#[derive(Clone, Debug)]
pub struct EqualLinear {
    pub weight: Param,
    pub bias: Param,
    scale: f64,
    lr_mul: f64,
}

impl EqualLinear {
    pub fn new(rng: &mut Rng64, input: usize, output: usize, bias_init: f64, lr_mul: f64) -> Self {
        let weight = randn(rng, &[output, input]).mapv(|v| v / lr_mul);
        EqualLinear {
            weight: Param::new(weight, true),
            bias: Param::new(Array::from_elem(IxDyn(&[output]), bias_init / lr_mul), true),
            scale: lr_mul / (input as f64).sqrt(),
            lr_mul,
        }
    }

    /// `[n, input] -> [n, output]`.
    pub fn forward(&self, x: &Var) -> Var {
        let w = self.weight.var().scale(self.scale);
        let b = self.bias.var().scale(self.lr_mul);
        let out = b.shape()[0];
        x.matmul(&w.t()).add(&b.reshape(&[1, out]))
    }
}

impl Module for EqualLinear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Same-padded convolution with equalized learning rate.
#[derive(Clone, Debug)]
pub struct EqualConv {
    pub weight: Param,
    pub bias: Param,
    scale: f64,
}

impl EqualConv {
    pub fn new(rng: &mut Rng64, input: usize, output: usize, kernel: usize) -> Self {
        EqualConv {
            weight: Param::new(randn(rng, &[output, input, kernel, kernel]), true),
            bias: Param::new(Array::zeros(IxDyn(&[output])), true),
            scale: 1.0 / ((input * kernel * kernel) as f64).sqrt(),
        }
    }

    /// Scales the initial weights, e.g. to start a prediction head near zero.
    pub fn with_init_gain(mut self, gain: f64) -> Self {
        let w = self.weight.value().mapv(|v| v * gain);
        self.weight.set_value(w);
        self
    }

    pub fn forward(&self, x: &Var) -> Var {
        let w = self.weight.var().scale(self.scale);
        let o = w.shape()[0];
        x.conv2d(&w).add(&self.bias.var().reshape(&[1, o, 1, 1]))
    }
}

impl Module for EqualConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Style-modulated convolution: the per-sample style scales the input
/// channels of a shared kernel, and (optionally) each output channel is
/// renormalized to unit expected variance.
#[derive(Clone, Debug)]
pub struct ModConv {
    pub weight: Param,
    pub bias: Param,
    pub affine: EqualLinear,
    scale: f64,
    demodulate: bool,
}

impl ModConv {
    pub fn new(rng: &mut Rng64, style_dim: usize, input: usize, output: usize, kernel: usize, demodulate: bool) -> Self {
        let affine = EqualLinear::new(rng, style_dim, input, 1.0, 1.0);
        ModConv {
            weight: Param::new(randn(rng, &[output, input, kernel, kernel]), true),
            bias: Param::new(Array::zeros(IxDyn(&[output])), true),
            affine,
            scale: 1.0 / ((input * kernel * kernel) as f64).sqrt(),
            demodulate,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape()[0]
    }

    /// `x`: `[n, c, h, w]`, `style`: `[n, style_dim]`. Returns the
    /// pre-activation output including bias.
    pub fn forward(&self, x: &Var, style: &Var) -> Var {
        let n = x.shape()[0];
        let c = x.shape()[1];
        let o = self.out_channels();
        let s = self.affine.forward(style);
        let w = self.weight.var().scale(self.scale);
        let mut y = x.mul(&s.reshape(&[n, c, 1, 1])).conv2d(&w);
        if self.demodulate {
            // sum over kernel taps of w^2 -> [o, c]
            let wsq = w.square().sum_axes(&[2, 3]).reshape(&[o, c]);
            let d = s.square().matmul(&wsq.t()).add_scalar(1e-8).powf(-0.5);
            y = y.mul(&d.reshape(&[n, o, 1, 1]));
        }
        y.add(&self.bias.var().reshape(&[1, o, 1, 1]))
    }
}

impl Module for ModConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
        self.affine.visit(&join(prefix, "affine"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
        self.affine.visit_mut(&join(prefix, "affine"), f);
    }
}
