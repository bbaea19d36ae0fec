use std::collections::BTreeMap;

use ndarray::IxDyn;
use oodinv_tensor::init::rng;
use oodinv_tensor::{join, no_grad, Array, Module, Param, Var};

use super::layers::{act, EqualConv, EqualLinear};
use super::types::{FeaturePyramid, ImageTensor, LatentCode, NetConfig, PyramidRole};
use crate::error::{ensure, Result};

/// Strided convolutional pyramid that predicts a W+ code and exposes its
/// intermediate features at the align resolutions.
///
/// At every resolution `r` a 3x3 convolution keeps `channels_at(r)`
/// channels (this is where the feature taps sit), then the map is
/// average-pooled and projected to the next resolution's width. The 4x4
/// map is flattened into a linear head that predicts an offset from
/// `latent_base`, one style per slot.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: NetConfig,
    pub from_rgb: EqualConv,
    /// One `(same-width conv, down conv)` pair per resolution above 4,
    /// from the output resolution downward.
    pub blocks: Vec<(EqualConv, EqualConv)>,
    pub final_conv: EqualConv,
    pub head: EqualLinear,
    /// Added to the head output; usually initialized to the generator's mean style.
    pub latent_base: Param,
}

impl Encoder {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng(seed);
        let top = cfg.output_resolution;
        let mut blocks = Vec::new();
        let mut res: Vec<usize> = cfg.resolutions();
        res.reverse();
        for pair in res.windows(2) {
            let (c, next) = (cfg.channels_at(pair[0]), cfg.channels_at(pair[1]));
            blocks.push((EqualConv::new(&mut r, c, c, 3), EqualConv::new(&mut r, c, next, 3)));
        }
        let c4 = cfg.channels_at(4);
        let (s, d) = (cfg.num_style_slots(), cfg.style_dim);
        Ok(Encoder {
            cfg: cfg.clone(),
            from_rgb: EqualConv::new(&mut r, 3, cfg.channels_at(top), 1),
            blocks,
            final_conv: EqualConv::new(&mut r, c4, c4, 3),
            head: EqualLinear::new(&mut r, c4 * 16, s * d, 0.0, 1.0),
            latent_base: Param::new(Array::zeros(IxDyn(&[s, d])), true),
        })
    }

    /// Sets every slot of the latent base to `w` (`[style_dim]`).
    pub fn set_latent_base(&mut self, w: &Array) {
        let (s, d) = (self.cfg.num_style_slots(), self.cfg.style_dim);
        let base = w.broadcast(IxDyn(&[s, d])).expect("style vector width").to_owned();
        self.latent_base.set_value(base);
    }

    /// `[n, 3, r, r]` -> (`[n, slots, dim]`, features at the align resolutions).
    pub fn encode_var(&self, x: &Var) -> Result<(Var, BTreeMap<usize, Var>)> {
        let r = self.cfg.output_resolution;
        ensure!(
            x.ndim() == 4 && x.shape()[1] == 3 && x.shape()[2] == r && x.shape()[3] == r,
            Structural,
            "encoder expects [n, 3, {r}, {r}] input, got {:?}",
            x.shape()
        );
        let n = x.shape()[0];
        let mut feats = BTreeMap::new();
        let mut h = act(&self.from_rgb.forward(x));
        let mut res = r;
        for (same, down) in &self.blocks {
            h = act(&same.forward(&h));
            if self.cfg.align_resolutions.contains(&res) {
                feats.insert(res, h.clone());
            }
            h = act(&down.forward(&h.avg_pool2()));
            res /= 2;
        }
        h = act(&self.final_conv.forward(&h));
        let (s, d) = (self.cfg.num_style_slots(), self.cfg.style_dim);
        let w = self.head.forward(&h.flatten_from(1)).reshape(&[n, s, d]);
        let w = w.add(&self.latent_base.var().reshape(&[1, s, d]));
        Ok((w, feats))
    }

    pub fn encode(&self, x: &ImageTensor) -> Result<(LatentCode, FeaturePyramid)> {
        x.expect_resolution(self.cfg.output_resolution)?;
        let (w, feats) = no_grad(|| self.encode_var(&ImageTensor::stack(std::slice::from_ref(x))))?;
        let code = LatentCode::unstack(&w)?.remove(0);
        Ok((code, FeaturePyramid::from_batch(PyramidRole::Encoder, &feats).remove(0)))
    }
}

impl Module for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.from_rgb.visit(&join(prefix, "from_rgb"), f);
        for (i, (a, b)) in self.blocks.iter().enumerate() {
            a.visit(&join(prefix, &format!("blocks.{i}.conv")), f);
            b.visit(&join(prefix, &format!("blocks.{i}.down")), f);
        }
        self.final_conv.visit(&join(prefix, "final_conv"), f);
        self.head.visit(&join(prefix, "head"), f);
        f(&join(prefix, "latent_base"), &self.latent_base);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.from_rgb.visit_mut(&join(prefix, "from_rgb"), f);
        for (i, (a, b)) in self.blocks.iter_mut().enumerate() {
            a.visit_mut(&join(prefix, &format!("blocks.{i}.conv")), f);
            b.visit_mut(&join(prefix, &format!("blocks.{i}.down")), f);
        }
        self.final_conv.visit_mut(&join(prefix, "final_conv"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
        f(&join(prefix, "latent_base"), &mut self.latent_base);
    }
}
