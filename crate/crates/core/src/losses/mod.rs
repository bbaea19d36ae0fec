//! Training objectives: reconstruction, adversarial and mask regularization.

mod proxies;

use std::sync::Arc;

use oodinv_tensor::{grad, Var};
use serde::{Deserialize, Serialize};

pub use proxies::{EmbeddingProvider, FeatureProvider, RandomEmbedding, RandomFeatures};

use crate::error::{ensure, Result};
use crate::nets::{Discriminator, NetConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the binarization term.
    pub lambda_bin: f64,
    /// Expected OOD area per align level, lowest resolution first.
    pub phi_area: Vec<f64>,
    pub w_perceptual: f64,
    pub w_mse: f64,
    pub w_identity: f64,
    pub w_adv: f64,
    /// R1 penalty weight on real images.
    pub r1_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::for_net(&NetConfig::default())
    }
}

impl LossConfig {
    /// Defaults with one area budget per align level: 0.3 for the two
    /// coarsest levels, 0.25 above.
    pub fn for_net(net: &NetConfig) -> Self {
        let phi_area = (0..net.align_resolutions.len()).map(|i| if i < 2 { 0.3 } else { 0.25 }).collect();
        LossConfig { lambda_bin: 0.5, phi_area, w_perceptual: 1.0, w_mse: 1.0, w_identity: 0.1, w_adv: 0.05, r1_gamma: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda_bin", self.lambda_bin),
            ("w_perceptual", self.w_perceptual),
            ("w_mse", self.w_mse),
            ("w_identity", self.w_identity),
            ("w_adv", self.w_adv),
            ("r1_gamma", self.r1_gamma),
        ] {
            ensure!(w.is_finite() && w >= 0.0, Validation, "{name} must be a non-negative number, got {w}");
        }
        for &p in &self.phi_area {
            ensure!(p > 0.0 && p < 1.0, Validation, "phi_area values must be in (0, 1), got {p}");
        }
        Ok(())
    }
}

/// The proxy networks used by the reconstruction loss.
#[derive(Clone)]
pub struct LossNets {
    pub perceptual: Arc<dyn FeatureProvider>,
    pub identity: Arc<dyn EmbeddingProvider>,
}

impl Default for LossNets {
    fn default() -> Self {
        LossNets { perceptual: Arc::new(RandomFeatures::new(0)), identity: Arc::new(RandomEmbedding::new(1)) }
    }
}

fn same_shape(a: &Var, b: &Var) -> Result<()> {
    ensure!(a.shape() == b.shape(), Structural, "shape mismatch: {:?} vs {:?}", a.shape(), b.shape());
    Ok(())
}

pub fn mse(x: &Var, y: &Var) -> Result<Var> {
    same_shape(x, y)?;
    Ok(x.sub(y).square().mean())
}

/// Mean over stages of the mean squared feature difference.
pub fn perceptual_loss(nets: &LossNets, x: &Var, y: &Var) -> Result<Var> {
    same_shape(x, y)?;
    let fx = nets.perceptual.features(x);
    let fy = nets.perceptual.features(y);
    let k = fx.len() as f64;
    let mut total = Var::scalar_constant(0.0);
    for (a, b) in fx.iter().zip(&fy) {
        total = total.add(&a.sub(b).square().mean());
    }
    Ok(total.scale(1.0 / k))
}

/// Batch mean of `1 - cos(e(x), e(y))`.
pub fn identity_loss(nets: &LossNets, x: &Var, y: &Var) -> Result<Var> {
    same_shape(x, y)?;
    let (a, b) = (nets.identity.embed(x), nets.identity.embed(y));
    let dot = a.mul(&b).sum_axes(&[1]);
    let na = a.square().sum_axes(&[1]).add_scalar(1e-24).sqrt();
    let nb = b.square().sum_axes(&[1]).add_scalar(1e-24).sqrt();
    Ok(dot.div(&na.mul(&nb)).neg().add_scalar(1.0).mean())
}

/// Unweighted reconstruction terms.
pub struct RecTerms {
    pub per: Var,
    pub mse: Var,
    pub id: Var,
}

impl RecTerms {
    pub fn compute(nets: &LossNets, x: &Var, x_hat: &Var) -> Result<Self> {
        Ok(RecTerms { per: perceptual_loss(nets, x, x_hat)?, mse: mse(x, x_hat)?, id: identity_loss(nets, x, x_hat)? })
    }

    pub fn weighted(&self, cfg: &LossConfig) -> Var {
        self.per.scale(cfg.w_perceptual).add(&self.mse.scale(cfg.w_mse)).add(&self.id.scale(cfg.w_identity))
    }
}

pub fn rec_loss(nets: &LossNets, x: &Var, x_hat: &Var, cfg: &LossConfig) -> Result<Var> {
    Ok(RecTerms::compute(nets, x, x_hat)?.weighted(cfg))
}

fn check_mask(m: &Var) -> Result<()> {
    for &v in m.value() {
        ensure!(
            v.is_finite() && (-crate::samm::RANGE_TOLERANCE..=1.0 + crate::samm::RANGE_TOLERANCE).contains(&v),
            Validation,
            "mask value {v} outside [0, 1]"
        );
    }
    Ok(())
}

/// Spatial mean of `min(M, 1 - M)`. At `M = 0.5` the gradient follows `M`.
pub fn bin_loss(m: &Var) -> Result<Var> {
    check_mask(m)?;
    Ok(m.minimum(&m.neg().add_scalar(1.0)).mean())
}

/// `max(0, mean(M) - phi)`: penalizes masks larger than the expected OOD area.
pub fn area_loss(m: &Var, phi: f64) -> Result<Var> {
    check_mask(m)?;
    ensure!(phi > 0.0 && phi < 1.0, Validation, "phi must be in (0, 1), got {phi}");
    Ok(m.mean().add_scalar(-phi).relu())
}

/// Per-level binarization and area terms, unweighted.
pub struct MaskTerms {
    pub bin: Vec<Var>,
    pub area: Vec<Var>,
}

impl MaskTerms {
    pub fn compute(levels: &[Var], cfg: &LossConfig) -> Result<Self> {
        ensure!(
            levels.len() == cfg.phi_area.len(),
            Validation,
            "{} mask levels but {} phi_area values",
            levels.len(),
            cfg.phi_area.len()
        );
        let bin = levels.iter().map(bin_loss).collect::<Result<_>>()?;
        let area = levels.iter().zip(&cfg.phi_area).map(|(m, &p)| area_loss(m, p)).collect::<Result<_>>()?;
        Ok(MaskTerms { bin, area })
    }

    pub fn weighted(&self, cfg: &LossConfig) -> Var {
        let mut total = Var::scalar_constant(0.0);
        for (b, a) in self.bin.iter().zip(&self.area) {
            total = total.add(&b.scale(cfg.lambda_bin)).add(a);
        }
        total
    }
}

/// Sum over levels of `lambda_bin * bin + area`.
pub fn mask_loss(levels: &[Var], cfg: &LossConfig) -> Result<Var> {
    Ok(MaskTerms::compute(levels, cfg)?.weighted(cfg))
}

fn check_logits(name: &str, v: &Var) -> Result<()> {
    ensure!(v.value().iter().all(|x| x.is_finite()), Validation, "{name} logits are not finite");
    Ok(())
}

/// Non-saturating logistic losses. `r1` is the mean squared input-gradient
/// norm on real images, weighted by `gamma / 2` in the critic term.
pub fn adversarial_losses(real: &Var, fake: &Var, r1: Option<&Var>, gamma: f64) -> Result<(Var, Var)> {
    check_logits("real", real)?;
    check_logits("fake", fake)?;
    let g_term = fake.neg().softplus().mean();
    let mut d_term = fake.softplus().mean().add(&real.neg().softplus().mean());
    if let Some(p) = r1 {
        d_term = d_term.add(&p.scale(gamma / 2.0));
    }
    Ok((g_term, d_term))
}

/// Generator-side term alone.
pub fn generator_adv_loss(fake: &Var) -> Result<Var> {
    check_logits("fake", fake)?;
    Ok(fake.neg().softplus().mean())
}

/// Batch mean of `||dD(x)/dx||^2` at real images, differentiable with
/// respect to the critic's parameters. Returns the logits as well.
pub fn r1_penalty(disc: &Discriminator, real: &Var) -> Result<(Var, Var)> {
    let x = Var::leaf(real.value().clone(), true);
    let logits = disc.forward(&x)?;
    let gx = grad(&logits.sum(), &[&x], true).remove(0).expect("critic output depends on its input");
    let n = real.shape()[0] as f64;
    Ok((gx.square().sum().scale(1.0 / n), logits))
}

/// Named scalars of one step. `adv_g` is already weighted; `total` is
/// `rec + adv_g + mask`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub per: f64,
    pub mse: f64,
    pub id: f64,
    pub rec: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub bin: Vec<f64>,
    pub area: Vec<f64>,
    pub mask: f64,
    pub total: f64,
}

impl LossReport {
    /// Flat key -> value record, with per-level terms keyed by resolution.
    pub fn to_record(&self, resolutions: &[usize]) -> serde_json::Map<String, serde_json::Value> {
        let mut m = serde_json::Map::new();
        for (k, v) in [
            ("per", self.per),
            ("mse", self.mse),
            ("id", self.id),
            ("rec", self.rec),
            ("adv_g", self.adv_g),
            ("adv_d", self.adv_d),
            ("mask", self.mask),
            ("total", self.total),
        ] {
            m.insert(k.into(), v.into());
        }
        for (i, r) in resolutions.iter().enumerate() {
            if let Some(b) = self.bin.get(i) {
                m.insert(format!("bin_r{r}"), (*b).into());
            }
            if let Some(a) = self.area.get(i) {
                m.insert(format!("area_r{r}"), (*a).into());
            }
        }
        m
    }

    pub fn all_finite(&self) -> bool {
        [self.per, self.mse, self.id, self.rec, self.adv_g, self.adv_d, self.mask, self.total]
            .iter()
            .chain(&self.bin)
            .chain(&self.area)
            .all(|v| v.is_finite())
    }
}

/// The full objective and its itemized report. `fake_logits` are the
/// critic's logits on `x_hat`; without them the adversarial term is zero.
pub fn total_loss(
    nets: &LossNets,
    x: &Var,
    x_hat: &Var,
    mask_levels: &[Var],
    fake_logits: Option<&Var>,
    cfg: &LossConfig,
) -> Result<(Var, LossReport)> {
    cfg.validate()?;
    let rec_terms = RecTerms::compute(nets, x, x_hat)?;
    let rec = rec_terms.weighted(cfg);
    let mask_terms = MaskTerms::compute(mask_levels, cfg)?;
    let mask = mask_terms.weighted(cfg);
    let adv_g = match fake_logits {
        Some(f) => generator_adv_loss(f)?.scale(cfg.w_adv),
        None => Var::scalar_constant(0.0),
    };
    let total = rec.add(&adv_g).add(&mask);
    let report = LossReport {
        per: rec_terms.per.item(),
        mse: rec_terms.mse.item(),
        id: rec_terms.id.item(),
        rec: rec.item(),
        adv_g: adv_g.item(),
        adv_d: 0.0,
        bin: mask_terms.bin.iter().map(Var::item).collect(),
        area: mask_terms.area.iter().map(Var::item).collect(),
        mask: mask.item(),
        total: total.item(),
    };
    Ok((total, report))
}
