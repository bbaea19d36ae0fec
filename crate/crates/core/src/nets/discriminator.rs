use oodinv_tensor::init::rng;
use oodinv_tensor::{join, no_grad, Module, Param, Var};

use super::layers::{act, EqualConv, EqualLinear};
use super::types::{ImageTensor, NetConfig};
use crate::error::{ensure, Result};

/// Convolutional critic: one logit per image, higher meaning more real.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub cfg: NetConfig,
    pub from_rgb: EqualConv,
    pub blocks: Vec<(EqualConv, EqualConv)>,
    pub final_conv: EqualConv,
    pub fc: EqualLinear,
    pub out: EqualLinear,
}

impl Discriminator {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng(seed);
        let mut res = cfg.resolutions();
        res.reverse();
        let blocks = res
            .windows(2)
            .map(|p| {
                let (c, next) = (cfg.channels_at(p[0]), cfg.channels_at(p[1]));
                (EqualConv::new(&mut r, c, c, 3), EqualConv::new(&mut r, c, next, 3))
            })
            .collect();
        let c4 = cfg.channels_at(4);
        Ok(Discriminator {
            cfg: cfg.clone(),
            from_rgb: EqualConv::new(&mut r, 3, cfg.channels_at(cfg.output_resolution), 1),
            blocks,
            final_conv: EqualConv::new(&mut r, c4, c4, 3),
            fc: EqualLinear::new(&mut r, c4 * 16, c4, 0.0, 1.0),
            out: EqualLinear::new(&mut r, c4, 1, 0.0, 1.0),
        })
    }

    /// `[n, 3, r, r]` -> `[n]` logits.
    pub fn forward(&self, x: &Var) -> Result<Var> {
        let r = self.cfg.output_resolution;
        ensure!(
            x.ndim() == 4 && x.shape()[1] == 3 && x.shape()[2] == r && x.shape()[3] == r,
            Structural,
            "discriminator expects [n, 3, {r}, {r}] input, got {:?}",
            x.shape()
        );
        let n = x.shape()[0];
        let mut h = act(&self.from_rgb.forward(x));
        for (same, down) in &self.blocks {
            h = act(&same.forward(&h));
            h = act(&down.forward(&h.avg_pool2()));
        }
        h = act(&self.final_conv.forward(&h));
        let h = act(&self.fc.forward(&h.flatten_from(1)));
        Ok(self.out.forward(&h).reshape(&[n]))
    }

    pub fn discriminate(&self, x: &ImageTensor) -> Result<f64> {
        x.expect_resolution(self.cfg.output_resolution)?;
        let logit = no_grad(|| self.forward(&ImageTensor::stack(std::slice::from_ref(x))))?;
        Ok(logit.to_vec()[0])
    }
}

impl Module for Discriminator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.from_rgb.visit(&join(prefix, "from_rgb"), f);
        for (i, (a, b)) in self.blocks.iter().enumerate() {
            a.visit(&join(prefix, &format!("blocks.{i}.conv")), f);
            b.visit(&join(prefix, &format!("blocks.{i}.down")), f);
        }
        self.final_conv.visit(&join(prefix, "final_conv"), f);
        self.fc.visit(&join(prefix, "fc"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.from_rgb.visit_mut(&join(prefix, "from_rgb"), f);
        for (i, (a, b)) in self.blocks.iter_mut().enumerate() {
            a.visit_mut(&join(prefix, &format!("blocks.{i}.conv")), f);
            b.visit_mut(&join(prefix, &format!("blocks.{i}.down")), f);
        }
        self.final_conv.visit_mut(&join(prefix, "final_conv"), f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}
