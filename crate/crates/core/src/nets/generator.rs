use std::collections::BTreeMap;

use ndarray::{Array1, Array3, IxDyn};
use oodinv_tensor::init::{randn, rng};
use oodinv_tensor::{join, no_grad, Array, Module, Param, Var};

use super::layers::{act, EqualLinear, ModConv};
use super::types::{FeaturePyramid, ImageTensor, LatentCode, NetConfig, PyramidRole};
use crate::error::{ensure, Result};

/// Replacement applied to the generator feature at an align resolution:
/// `(level index, g_i) -> g_i'`. The index is the position of the
/// resolution in [`NetConfig::align_resolutions`].
pub type LayerHook<'a> = dyn FnMut(usize, &Var) -> Result<Var> + 'a;

/// z -> w multilayer perceptron with a running mean of its outputs.
#[derive(Clone, Debug)]
pub struct Mapping {
    pub layers: Vec<EqualLinear>,
    /// Running mean of mapped styles (not trained by gradient).
    pub w_avg: Param,
}

impl Mapping {
    fn new(cfg: &NetConfig, seed: u64) -> Self {
        let mut r = rng(seed);
        let d = cfg.style_dim;
        Mapping {
            layers: (0..cfg.mapping_layers).map(|_| EqualLinear::new(&mut r, d, d, 0.0, 0.01)).collect(),
            w_avg: Param::new(Array::zeros(IxDyn(&[d])), false),
        }
    }

    /// `[n, style_dim] -> [n, style_dim]`.
    pub fn forward(&self, z: &Var) -> Var {
        let norm = z.square().mean_axes(&[1]).add_scalar(1e-8).powf(-0.5);
        let mut h = z.mul(&norm);
        for l in &self.layers {
            h = act(&l.forward(&h));
        }
        h
    }

    /// Moves the running mean toward the batch mean of `w` (`[n, dim]`).
    pub fn track(&mut self, w: &Array, beta: f64) {
        let batch_mean = w.mean_axis(ndarray::Axis(0)).unwrap();
        let next = self.w_avg.value() * beta + &(batch_mean * (1.0 - beta));
        self.w_avg.set_value(next);
    }
}

impl Module for Mapping {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.layers.visit(&join(prefix, "layers"), f);
        f(&join(prefix, "w_avg"), &self.w_avg);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.layers.visit_mut(&join(prefix, "layers"), f);
        f(&join(prefix, "w_avg"), &mut self.w_avg);
    }
    fn set_trainable(&mut self, trainable: bool) {
        self.layers.set_trainable(trainable);
    }
}

/// Result of one synthesis pass.
pub struct Synthesis {
    /// `[n, 3, r, r]`, clamped to `[-1, 1]`.
    pub image: Var,
    /// Generator features at each align resolution, before any hook.
    pub features: BTreeMap<usize, Var>,
    /// The last feature map, the input of the output convolution.
    pub last: Var,
}

/// Miniature style-based generator: learned 4x4 constant, modulated
/// convolutions with bilinear upsampling, and a modulated 1x1 output
/// convolution. No per-layer noise, so synthesis is deterministic.
#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: NetConfig,
    pub mapping: Mapping,
    pub constant: Param,
    pub conv4: ModConv,
    /// Per resolution above 4: (upsampling conv, conv).
    pub blocks: Vec<(ModConv, ModConv)>,
    pub rgb: ModConv,
}

impl Generator {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng(seed);
        let d = cfg.style_dim;
        let c4 = cfg.channels_at(4);
        let mut blocks = Vec::new();
        let res = cfg.resolutions();
        for pair in res.windows(2) {
            let (cin, cout) = (cfg.channels_at(pair[0]), cfg.channels_at(pair[1]));
            blocks.push((ModConv::new(&mut r, d, cin, cout, 3, true), ModConv::new(&mut r, d, cout, cout, 3, true)));
        }
        let last = cfg.channels_at(cfg.output_resolution);
        Ok(Generator {
            cfg: cfg.clone(),
            mapping: Mapping::new(cfg, seed ^ 0x5eed),
            constant: Param::new(randn(&mut r, &[1, c4, 4, 4]), true),
            conv4: ModConv::new(&mut r, d, c4, c4, 3, true),
            blocks,
            rgb: ModConv::new(&mut r, d, last, 3, 1, false),
        })
    }

    /// Mapped style for each row of `z`, broadcast to every slot and pulled
    /// toward the running mean by `1 - truncation`. Returns `[n, slots, dim]`.
    pub fn map_var(&self, z: &Var, truncation: f64) -> Var {
        let n = z.shape()[0];
        let (s, d) = (self.cfg.num_style_slots(), self.cfg.style_dim);
        let mut w = self.mapping.forward(z);
        if truncation != 1.0 {
            let mu = self.mapping.w_avg.var().reshape(&[1, d]);
            w = mu.add(&w.sub(&mu).scale(truncation));
        }
        w.reshape(&[n, 1, d]).broadcast_to(&[n, s, d])
    }

    pub fn map_latent(&self, z: &Array1<f64>, truncation: f64) -> Result<LatentCode> {
        ensure!(z.iter().all(|v| v.is_finite()), Validation, "z contains non-finite values");
        ensure!(truncation > 0.0 && truncation <= 1.0, Validation, "truncation must be in (0, 1], got {truncation}");
        ensure!(z.len() == self.cfg.style_dim, Structural, "z has {} entries, expected {}", z.len(), self.cfg.style_dim);
        let zv = Var::constant(z.clone().into_shape_with_order(IxDyn(&[1, z.len()])).unwrap());
        let w = no_grad(|| self.map_var(&zv, truncation));
        Ok(LatentCode::unstack(&w)?.remove(0))
    }

    fn slot(w: &Var, i: usize) -> Var {
        let (n, d) = (w.shape()[0], w.shape()[2]);
        w.narrow(1, i, 1).reshape(&[n, d])
    }

    /// Output convolution before the clamp.
    pub fn to_rgb_preclamp_var(&self, last: &Var, w: &Var) -> Var {
        self.rgb.forward(last, &Self::slot(w, self.cfg.rgb_slot()))
    }

    /// Runs synthesis for `w` (`[n, slots, dim]`). When `hook` is given, its
    /// result replaces the feature at each align resolution before the next
    /// styled convolution.
    pub fn synthesize_var(&self, w: &Var, mut hook: Option<&mut LayerHook<'_>>) -> Result<Synthesis> {
        let cfg = &self.cfg;
        let n = w.shape()[0];
        ensure!(
            w.ndim() == 3 && w.shape()[1] == cfg.num_style_slots() && w.shape()[2] == cfg.style_dim,
            Structural,
            "latent batch has shape {:?}, expected [n, {}, {}]",
            w.shape(),
            cfg.num_style_slots(),
            cfg.style_dim
        );
        let c4 = cfg.channels_at(4);
        let mut features = BTreeMap::new();
        let mut x = self.constant.var().broadcast_to(&[n, c4, 4, 4]);
        x = act(&self.conv4.forward(&x, &Self::slot(w, 0)));
        let mut res = 4;
        let mut tap = |res: usize, x: Var, features: &mut BTreeMap<usize, Var>| -> Result<Var> {
            let Some(level) = cfg.align_resolutions.iter().position(|&a| a == res) else { return Ok(x) };
            features.insert(res, x.clone());
            match hook.as_mut() {
                Some(h) => {
                    let y = h(level, &x)?;
                    ensure!(
                        y.shape() == x.shape(),
                        Structural,
                        "hook changed the feature shape at level {level} ({res}x{res}): {:?} -> {:?}",
                        x.shape(),
                        y.shape()
                    );
                    Ok(y)
                }
                None => Ok(x),
            }
        };
        x = tap(res, x, &mut features)?;
        for (i, (up, conv)) in self.blocks.iter().enumerate() {
            res *= 2;
            x = x.resize_bilinear(res, res);
            x = act(&up.forward(&x, &Self::slot(w, 2 * i + 1)));
            x = act(&conv.forward(&x, &Self::slot(w, 2 * i + 2)));
            if res < cfg.output_resolution {
                x = tap(res, x, &mut features)?;
            }
        }
        let image = self.to_rgb_preclamp_var(&x, w).clamp(-1.0, 1.0);
        Ok(Synthesis { image, features, last: x })
    }

    /// Single-image synthesis with an optional array-level hook.
    pub fn synthesize(
        &self,
        w: &LatentCode,
        hook: Option<&dyn Fn(usize, &Array3<f64>) -> Array3<f64>>,
    ) -> Result<(ImageTensor, FeaturePyramid)> {
        let wv = LatentCode::stack(std::slice::from_ref(w));
        let out = no_grad(|| match hook {
            Some(h) => {
                let mut adapter = |level: usize, g: &Var| -> Result<Var> {
                    let a = g.value().index_axis(ndarray::Axis(0), 0).to_owned().into_dimensionality().unwrap();
                    let b = h(level, &a);
                    let (c, hh, ww) = b.dim();
                    Ok(Var::constant(b.into_shape_with_order(IxDyn(&[1, c, hh, ww])).unwrap()))
                };
                self.synthesize_var(&wv, Some(&mut adapter))
            }
            None => self.synthesize_var(&wv, None),
        })?;
        let image = ImageTensor::unstack(&out.image)?.remove(0);
        let pyramid = FeaturePyramid::from_batch(PyramidRole::Generator, &out.features).remove(0);
        Ok((image, pyramid))
    }

    /// Output convolution of a final feature map.
    pub fn to_rgb(&self, last: &Array3<f64>, w: &LatentCode) -> Result<ImageTensor> {
        let (c, h, wd) = last.dim();
        let r = self.cfg.output_resolution;
        ensure!(h == r && wd == r, Structural, "to_rgb expects {r}x{r} features, got {h}x{wd}");
        ensure!(c == self.cfg.channels_at(r), Structural, "to_rgb expects {} channels, got {c}", self.cfg.channels_at(r));
        let x = Var::constant(last.clone().into_shape_with_order(IxDyn(&[1, c, h, wd])).unwrap());
        let wv = LatentCode::stack(std::slice::from_ref(w));
        let img = no_grad(|| self.to_rgb_preclamp_var(&x, &wv).clamp(-1.0, 1.0));
        Ok(ImageTensor::unstack(&img)?.remove(0))
    }

    /// Samples `n` latent codes from seeded normal noise.
    pub fn sample_latents(&self, n: usize, seed: u64, truncation: f64) -> Var {
        let mut r = rng(seed);
        let z = Var::constant(randn(&mut r, &[n, self.cfg.style_dim]));
        no_grad(|| self.map_var(&z, truncation))
    }
}

impl Module for Generator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.mapping.visit(&join(prefix, "mapping"), f);
        f(&join(prefix, "constant"), &self.constant);
        self.conv4.visit(&join(prefix, "conv4"), f);
        for (i, (up, conv)) in self.blocks.iter().enumerate() {
            up.visit(&join(prefix, &format!("blocks.{i}.up")), f);
            conv.visit(&join(prefix, &format!("blocks.{i}.conv")), f);
        }
        self.rgb.visit(&join(prefix, "rgb"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.mapping.visit_mut(&join(prefix, "mapping"), f);
        f(&join(prefix, "constant"), &mut self.constant);
        self.conv4.visit_mut(&join(prefix, "conv4"), f);
        for (i, (up, conv)) in self.blocks.iter_mut().enumerate() {
            up.visit_mut(&join(prefix, &format!("blocks.{i}.up")), f);
            conv.visit_mut(&join(prefix, &format!("blocks.{i}.conv")), f);
        }
        self.rgb.visit_mut(&join(prefix, "rgb"), f);
    }
    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut("", &mut |_, p| p.set_trainable(trainable));
        // The running mean is a statistic, never a gradient target.
        self.mapping.w_avg.set_trainable(false);
    }
}
