//! The assembled model: encode, align while synthesizing, gather, blend.

use oodinv_tensor::{no_grad, Var};
use serde::{Deserialize, Serialize};

use crate::compose::blend_var;
use crate::error::{ensure, Result};
use crate::nets::{Discriminator, Encoder, FeaturePyramid, Generator, ImageTensor, LatentCode, NetConfig, PyramidRole};
use crate::samm::{gather_masks_var, iterative_align_var, warp_blend, FlowField, GatheredMask, MaskLevel, Samm, SammConfig};

/// Generator, encoder, alignment module and critic sharing one [`NetConfig`].
#[derive(Clone, Debug)]
pub struct Model {
    pub net: NetConfig,
    pub generator: Generator,
    pub encoder: Encoder,
    pub samm: Samm,
    pub discriminator: Discriminator,
}

/// Batched graph outputs of one forward pass.
pub struct Forward {
    /// `[n, slots, dim]`.
    pub w: Var,
    /// Image synthesized with alignment hooks.
    pub x_in_hat: Var,
    /// `M_{i,N}` per level, lowest resolution first.
    pub masks: Vec<Var>,
    pub flows: Vec<Var>,
    /// `[n, 1, r, r]`.
    pub gathered: Var,
    pub blended: Var,
}

/// Everything produced when inverting one image.
#[derive(Clone, Debug)]
pub struct Inversion {
    pub latent: LatentCode,
    pub encoder_features: FeaturePyramid,
    /// `G(E(x))` without alignment.
    pub plain: ImageTensor,
    pub x_in_hat: ImageTensor,
    pub masks: Vec<MaskLevel>,
    pub flows: Vec<FlowField>,
    pub gathered: GatheredMask,
    pub blended: ImageTensor,
    /// The alignment settings the masks and flows were computed with.
    pub samm: SammConfig,
}

/// Quality of one inversion against its input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    /// Fraction of the image copied from the input.
    pub aoa: f64,
    /// PSNR of the inversion without blending.
    pub plain_psnr_db: f64,
}

impl Inversion {
    pub fn metrics(&self, x: &ImageTensor) -> InversionMetrics {
        use crate::train::metrics::{psnr, ssim};
        InversionMetrics {
            psnr_db: psnr(x.pixels(), self.blended.pixels()),
            ssim: ssim(x.pixels(), self.blended.pixels()),
            aoa: self.gathered.mean(),
            plain_psnr_db: psnr(x.pixels(), self.plain.pixels()),
        }
    }
}

impl Model {
    pub fn new(net: &NetConfig, samm: SammConfig, seed: u64) -> Result<Self> {
        Ok(Model {
            net: net.clone(),
            generator: Generator::new(net, seed)?,
            encoder: Encoder::new(net, seed.wrapping_add(1))?,
            samm: Samm::new(net, samm, seed.wrapping_add(2))?,
            discriminator: Discriminator::new(net, seed.wrapping_add(3))?,
        })
    }

    /// Encodes `x` and synthesizes with the alignment module in the loop.
    pub fn forward_var(&self, x: &Var, cfg: &SammConfig) -> Result<Forward> {
        let (w, feats) = self.encoder.encode_var(x)?;
        let mut masks = Vec::new();
        let mut flows = Vec::new();
        let align = &self.net.align_resolutions;
        let mut hook = |level: usize, g: &Var| -> Result<Var> {
            let f = &feats[&align[level]];
            let out = iterative_align_var(&self.samm.levels[level], f, g, cfg)?;
            masks.push(out.mask);
            flows.push(out.flow);
            Ok(out.g)
        };
        let synth = self.generator.synthesize_var(&w, Some(&mut hook))?;
        let gathered = gather_masks_var(&masks, self.net.output_resolution)?;
        let blended = blend_var(x, &synth.image, &gathered)?;
        Ok(Forward { w, x_in_hat: synth.image, masks, flows, gathered, blended })
    }

    /// Synthesizes `w` reusing precomputed masks and flows at every level.
    pub fn synthesize_cached_var(&self, w: &Var, masks: &[Var], flows: &[Var], skip_warp: bool) -> Result<Var> {
        ensure!(
            masks.len() == self.net.align_resolutions.len() && flows.len() == masks.len(),
            Structural,
            "expected {} cached levels, got {} masks and {} flows",
            self.net.align_resolutions.len(),
            masks.len(),
            flows.len()
        );
        let mut hook = |level: usize, g: &Var| warp_blend(g, &flows[level], &masks[level], skip_warp);
        Ok(self.generator.synthesize_var(w, Some(&mut hook))?.image)
    }

    /// Full inversion of a batch of images.
    pub fn invert_batch(&self, images: &[ImageTensor], cfg: &SammConfig) -> Result<Vec<Inversion>> {
        ensure!(!images.is_empty(), Validation, "nothing to invert");
        for img in images {
            img.expect_resolution(self.net.output_resolution)?;
        }
        cfg.validate()?;
        let x = ImageTensor::stack(images);
        no_grad(|| {
            let fwd = self.forward_var(&x, cfg)?;
            let plain = self.generator.synthesize_var(&fwd.w, None)?.image;
            let (_, feats) = self.encoder.encode_var(&x)?;
            let latents = LatentCode::unstack(&fwd.w)?;
            let pyramids = FeaturePyramid::from_batch(PyramidRole::Encoder, &feats);
            let plains = ImageTensor::unstack(&plain)?;
            let x_in = ImageTensor::unstack(&fwd.x_in_hat)?;
            let blended = ImageTensor::unstack(&fwd.blended)?;
            let gathered = GatheredMask::from_batch(&fwd.gathered)?;
            let level_masks: Vec<Vec<MaskLevel>> = fwd.masks.iter().map(MaskLevel::from_batch).collect::<Result<_>>()?;
            let level_flows: Vec<Vec<FlowField>> = fwd.flows.iter().map(FlowField::from_batch).collect();
            Ok(latents
                .into_iter()
                .zip(pyramids)
                .zip(plains)
                .zip(x_in)
                .zip(blended)
                .zip(gathered)
                .enumerate()
                .map(|(i, (((((latent, pyr), plain), x_in_hat), blended), gathered))| Inversion {
                    latent,
                    encoder_features: pyr,
                    plain,
                    x_in_hat,
                    masks: level_masks.iter().map(|l| l[i].clone()).collect(),
                    flows: level_flows.iter().map(|l| l[i].clone()).collect(),
                    gathered,
                    blended,
                    samm: cfg.clone(),
                })
                .collect())
        })
    }

    pub fn invert(&self, image: &ImageTensor) -> Result<Inversion> {
        Ok(self.invert_batch(std::slice::from_ref(image), &self.samm.cfg)?.remove(0))
    }

    pub fn invert_with(&self, image: &ImageTensor, cfg: &SammConfig) -> Result<Inversion> {
        Ok(self.invert_batch(std::slice::from_ref(image), cfg)?.remove(0))
    }

    /// Re-synthesizes `latent` with the masks and flows cached in `inv` and
    /// blends the result with `x`. Returns `(x_in_hat, blended)`.
    pub fn resynthesize(&self, x: &ImageTensor, inv: &Inversion, latent: &LatentCode) -> Result<(ImageTensor, ImageTensor)> {
        x.expect_resolution(self.net.output_resolution)?;
        let masks: Vec<Var> = inv.masks.iter().map(MaskLevel::to_var).collect();
        let flows: Vec<Var> = inv.flows.iter().map(FlowField::to_var).collect();
        no_grad(|| {
            let w = LatentCode::stack(std::slice::from_ref(latent));
            let img = self.synthesize_cached_var(&w, &masks, &flows, inv.samm.skip_alignment)?;
            let xv = ImageTensor::stack(std::slice::from_ref(x));
            let blended = blend_var(&xv, &img, &inv.gathered.to_var())?;
            Ok((ImageTensor::unstack(&img)?.remove(0), ImageTensor::unstack(&blended)?.remove(0)))
        })
    }

    /// Per-sample generator features for a batch (test and inspection aid).
    pub fn generator_features(&self, latent: &LatentCode) -> Result<FeaturePyramid> {
        Ok(self.generator.synthesize(latent, None)?.1)
    }
}
