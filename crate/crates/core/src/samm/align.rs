//! Per-level prediction heads and the iterative alignment recurrence.

use ndarray::{Array2, Array3, IxDyn};
use oodinv_tensor::init::rng;
use oodinv_tensor::{join, no_grad, Module, Param, Var};
use serde::{Deserialize, Serialize};

use super::masks::{accumulate_mask_var, ensure_in_range_var, MaskLevel};
use super::warp::{grid_sample_var, FlowField};
use crate::error::{ensure, Result};
use crate::nets::{EqualConv, NetConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SammConfig {
    /// Alignment iterations per level.
    pub iterations: usize,
    /// Bound on each per-iteration flow step, in normalized units.
    pub max_displacement: f64,
    /// Use `M <- m` instead of `M <- M (m + 1 - M)` after the first iteration.
    pub alt_mask_update: bool,
    /// Replace the warp by the identity; masks are still predicted and used.
    pub skip_alignment: bool,
    /// Initial bias of the mask logit; negative starts the masks mostly closed.
    pub mask_bias_init: f64,
}

impl Default for SammConfig {
    fn default() -> Self {
        SammConfig { iterations: 2, max_displacement: 0.25, alt_mask_update: false, skip_alignment: false, mask_bias_init: 0.0 }
    }
}

impl SammConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.iterations >= 1, Validation, "iterations must be at least 1");
        ensure!(
            self.max_displacement > 0.0 && self.max_displacement <= 1.0,
            Validation,
            "max_displacement must be in (0, 1], got {}",
            self.max_displacement
        );
        ensure!(self.mask_bias_init.is_finite(), Validation, "mask_bias_init must be finite");
        Ok(())
    }
}

/// Anything that maps `(f, g_prev)` to a flow step `[n, 2, h, w]` and a
/// mask `[n, 1, h, w]`.
pub trait StepPredictor {
    fn predict(&self, f: &Var, g_prev: &Var) -> Result<(Var, Var)>;
}

impl<F: Fn(&Var, &Var) -> Result<(Var, Var)>> StepPredictor for F {
    fn predict(&self, f: &Var, g_prev: &Var) -> Result<(Var, Var)> {
        self(f, g_prev)
    }
}

/// Wraps a predictor and overrides its mask with a constant.
pub struct PinnedMask<'a> {
    pub inner: &'a dyn StepPredictor,
    pub value: f64,
}

impl StepPredictor for PinnedMask<'_> {
    fn predict(&self, f: &Var, g_prev: &Var) -> Result<(Var, Var)> {
        let (flow, m) = self.inner.predict(f, g_prev)?;
        Ok((flow, Var::full(m.shape(), self.value)))
    }
}

/// Alignment head of one level: two 3x3 convolutions on `f ⊕ g`, then a
/// 3-channel output split into a bounded flow step and a logistic mask.
#[derive(Clone, Debug)]
pub struct SammLevel {
    pub resolution: usize,
    pub conv1: EqualConv,
    pub conv2: EqualConv,
    pub head: EqualConv,
    pub max_displacement: f64,
}

impl SammLevel {
    pub fn new(resolution: usize, channels: usize, hidden: usize, max_displacement: f64, seed: u64) -> Self {
        let mut r = rng(seed);
        SammLevel {
            resolution,
            conv1: EqualConv::new(&mut r, 2 * channels, hidden, 3),
            conv2: EqualConv::new(&mut r, hidden, hidden, 3),
            head: EqualConv::new(&mut r, hidden, 3, 3).with_init_gain(0.1),
            max_displacement,
        }
    }

    fn with_mask_bias(mut self, bias: f64) -> Self {
        let mut b = self.head.bias.value().clone();
        b[2] = bias;
        self.head.bias.set_value(b);
        self
    }

    /// Array form for one sample: `(dx, dy, m)`.
    pub fn predict_step(&self, f: &Array3<f64>, g_prev: &Array3<f64>) -> Result<(Array2<f64>, Array2<f64>, MaskLevel)> {
        ensure!(
            f.dim() == g_prev.dim(),
            Structural,
            "f is {:?} but g is {:?} at level {}",
            f.dim(),
            g_prev.dim(),
            self.resolution
        );
        let (flow, m) = no_grad(|| self.predict(&batch1(f), &batch1(g_prev)))?;
        let ff = FlowField::from_batch(&flow).remove(0);
        Ok((ff.dx, ff.dy, MaskLevel::from_batch(&m)?.remove(0)))
    }
}

fn batch1(a: &Array3<f64>) -> Var {
    let (c, h, w) = a.dim();
    Var::constant(a.clone().into_shape_with_order(IxDyn(&[1, c, h, w])).unwrap())
}

impl StepPredictor for SammLevel {
    fn predict(&self, f: &Var, g_prev: &Var) -> Result<(Var, Var)> {
        ensure!(
            f.shape() == g_prev.shape(),
            Structural,
            "f has shape {:?} but g has {:?} at level {}",
            f.shape(),
            g_prev.shape(),
            self.resolution
        );
        let expected = self.conv1.weight.value().shape()[1];
        ensure!(
            f.ndim() == 4 && 2 * f.shape()[1] == expected,
            Structural,
            "level {} expects {} feature channels, got {:?}",
            self.resolution,
            expected / 2,
            f.shape()
        );
        let h = Var::cat(&[f.clone(), g_prev.clone()], 1);
        let h = self.conv1.forward(&h).leaky_relu(0.2);
        let h = self.conv2.forward(&h).leaky_relu(0.2);
        let out = self.head.forward(&h);
        let flow = out.narrow(1, 0, 2).tanh().scale(self.max_displacement);
        let mask = out.narrow(1, 2, 1).sigmoid();
        Ok((flow, mask))
    }
}

impl Module for SammLevel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Result of aligning one level.
#[derive(Clone)]
pub struct Aligned {
    /// `g_{i,N}`.
    pub g: Var,
    /// `M_{i,N}`, `[n, 1, h, w]`.
    pub mask: Var,
    /// Accumulated flow, `[n, 2, h, w]`.
    pub flow: Var,
}

/// `warp(g, flow) * mask + g * (1 - mask)`; with `skip_warp` the warp is
/// replaced by the identity.
pub fn warp_blend(g: &Var, flow: &Var, mask: &Var, skip_warp: bool) -> Result<Var> {
    let warped = if skip_warp { g.clone() } else { grid_sample_var(g, flow)? };
    Ok(warped.mul(mask).add(&g.mul(&mask.neg().add_scalar(1.0))))
}

/// Runs `iterations` cycles of predict / accumulate / warp-and-blend. The
/// warp always resamples the original `g` with the accumulated flow.
pub fn iterative_align_var(predictor: &dyn StepPredictor, f: &Var, g: &Var, cfg: &SammConfig) -> Result<Aligned> {
    cfg.validate()?;
    ensure!(f.shape() == g.shape(), Structural, "f has shape {:?} but g has {:?}", f.shape(), g.shape());
    let (n, h, w) = (g.shape()[0], g.shape()[2], g.shape()[3]);
    let mut flow = Var::zeros(&[n, 2, h, w]);
    let mut mask: Option<Var> = None;
    let mut g_prev = g.clone();
    for _ in 0..cfg.iterations {
        let (delta, m) = predictor.predict(f, &g_prev)?;
        ensure!(delta.shape() == [n, 2, h, w], Structural, "flow step has shape {:?}", delta.shape());
        ensure!(m.shape() == [n, 1, h, w], Structural, "mask has shape {:?}", m.shape());
        ensure_in_range_var("predicted mask", &m)?;
        if !cfg.skip_alignment {
            flow = flow.add(&delta);
        }
        let next = match mask {
            Some(prev) if !cfg.alt_mask_update => accumulate_mask_var(&m, &prev)?,
            _ => m.clamp(0.0, 1.0),
        };
        g_prev = warp_blend(g, &flow, &next, cfg.skip_alignment)?;
        mask = Some(next);
    }
    Ok(Aligned { g: g_prev, mask: mask.unwrap(), flow })
}

/// One alignment head per align resolution, shared across iterations.
#[derive(Clone, Debug)]
pub struct Samm {
    pub cfg: SammConfig,
    pub levels: Vec<SammLevel>,
}

impl Samm {
    pub fn new(net: &NetConfig, cfg: SammConfig, seed: u64) -> Result<Self> {
        net.validate()?;
        cfg.validate()?;
        let levels = net
            .align_resolutions
            .iter()
            .enumerate()
            .map(|(i, &r)| SammLevel::new(r, net.channels_at(r), net.samm_hidden, cfg.max_displacement, seed.wrapping_add(i as u64)).with_mask_bias(cfg.mask_bias_init))
            .collect();
        Ok(Samm { cfg, levels })
    }

    pub fn level(&self, index: usize) -> &SammLevel {
        &self.levels[index]
    }

    /// Aligns one sample's `g` toward `f` at level `index`.
    pub fn iterative_align(&self, index: usize, f: &Array3<f64>, g: &Array3<f64>) -> Result<(Array3<f64>, MaskLevel, FlowField)> {
        let level = &self.levels[index];
        let out = no_grad(|| iterative_align_var(level, &batch1(f), &batch1(g), &self.cfg))?;
        let (c, h, w) = g.dim();
        let g_n = out.g.value().clone().into_shape_with_order((c, h, w)).unwrap();
        Ok((g_n, MaskLevel::from_batch(&out.mask)?.remove(0), FlowField::from_batch(&out.flow).remove(0)))
    }
}

impl Module for Samm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for l in &self.levels {
            l.visit(&join(prefix, &format!("r{}", l.resolution)), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for l in &mut self.levels {
            let p = join(prefix, &format!("r{}", l.resolution));
            l.visit_mut(&p, f);
        }
    }
}
