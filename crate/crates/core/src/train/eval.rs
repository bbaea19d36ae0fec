//! Evaluation of a trained model on a dataset: reconstruction quality,
//! predicted out-of-distribution area and mask agreement.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{mask_iou, psnr, ssim};
use crate::data::{has_masks, Sample};
use crate::error::{ensure, Error, Result};
use crate::losses::{rec_loss, LossConfig, LossNets};
use crate::nets::ImageTensor;
use crate::pipeline::Model;
use crate::samm::SammConfig;

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Overrides the number of alignment iterations.
    pub iterations: Option<usize>,
    pub skip_alignment: bool,
    /// Worker threads; images are always processed one at a time, so the
    /// result does not depend on this.
    pub jobs: usize,
    pub loss: Option<LossConfig>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { iterations: None, skip_alignment: false, jobs: 1, loss: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub iterations: usize,
    pub skip_alignment: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub index: usize,
    pub has_decal: bool,
    pub psnr_db: f64,
    pub ssim: f64,
    pub aoa: f64,
    pub mask_iou: Option<f64>,
    /// PSNR of the generator output without blending.
    pub plain_psnr_db: f64,
    pub rec_loss: f64,
}

/// Means over the decaled images only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub count: usize,
    pub psnr_db: f64,
    pub plain_psnr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub images: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub aoa: f64,
    /// Absent when the dataset carries no ground-truth masks.
    pub mask_iou: Option<f64>,
    pub plain_psnr_db: f64,
    pub rec_loss: f64,
    pub decaled: Option<SubsetStats>,
    pub records: Vec<ImageRecord>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { f64::NAN } else { s / n as f64 }
}

fn evaluate_one(model: &Model, cfg: &SammConfig, nets: &LossNets, loss: &LossConfig, index: usize, s: &Sample, masks: bool) -> Result<ImageRecord> {
    let inv = model.invert_with(&s.image, cfg)?;
    let x = s.image.pixels();
    let rec = oodinv_tensor::no_grad(|| {
        let xv = ImageTensor::stack(std::slice::from_ref(&s.image));
        let bv = ImageTensor::stack(std::slice::from_ref(&inv.blended));
        rec_loss(nets, &xv, &bv, loss).map(|v| v.item())
    })?;
    ensure!(
        s.gt_mask.dim() == inv.gathered.values.dim(),
        Structural,
        "ground-truth mask of image {index} is {:?}, expected {:?}",
        s.gt_mask.dim(),
        inv.gathered.values.dim()
    );
    Ok(ImageRecord {
        index,
        has_decal: s.has_decal,
        psnr_db: psnr(x, inv.blended.pixels()),
        ssim: ssim(x, inv.blended.pixels()),
        aoa: inv.gathered.mean(),
        mask_iou: if masks && s.has_decal { mask_iou(&inv.gathered.values, &s.gt_mask, IOU_THRESHOLD) } else { None },
        plain_psnr_db: psnr(x, inv.plain.pixels()),
        rec_loss: rec,
    })
}

/// Inverts, aligns and blends every image and aggregates the metrics.
/// Model weights are only read.
pub fn evaluate(model: &Model, samples: &[Sample], opts: &EvalOptions) -> Result<EvalReport> {
    ensure!(!samples.is_empty(), Validation, "evaluation set is empty");
    let mut cfg = model.samm.cfg.clone();
    if let Some(n) = opts.iterations {
        cfg.iterations = n;
    }
    cfg.skip_alignment = opts.skip_alignment;
    cfg.validate()?;
    let loss = opts.loss.clone().unwrap_or_else(|| LossConfig::for_net(&model.net));
    let nets = LossNets::default();
    let masks = has_masks(samples);
    let jobs = opts.jobs.max(1).min(samples.len());

    let mut slots: Vec<Option<Result<ImageRecord>>> = (0..samples.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = samples.len().div_ceil(jobs);
        for (c, out) in slots.chunks_mut(chunk).enumerate() {
            let (cfg, nets, loss) = (&cfg, &nets, &loss);
            scope.spawn(move || {
                for (k, slot) in out.iter_mut().enumerate() {
                    let i = c * chunk + k;
                    *slot = Some(evaluate_one(model, cfg, nets, loss, i, &samples[i], masks));
                }
            });
        }
    });
    let records = slots
        .into_iter()
        .map(|r| r.unwrap_or_else(|| Err(Error::Precondition("evaluation worker did not finish".into()))))
        .collect::<Result<Vec<_>>>()?;

    let decaled: Vec<&ImageRecord> = records.iter().filter(|r| r.has_decal).collect();
    let ious: Vec<f64> = records.iter().filter_map(|r| r.mask_iou).collect();
    Ok(EvalReport {
        variant: Variant { iterations: cfg.iterations, skip_alignment: cfg.skip_alignment },
        images: records.len(),
        psnr_db: mean(records.iter().map(|r| r.psnr_db)),
        ssim: mean(records.iter().map(|r| r.ssim)),
        aoa: mean(records.iter().map(|r| r.aoa)),
        mask_iou: (masks && !ious.is_empty()).then(|| mean(ious.into_iter())),
        plain_psnr_db: mean(records.iter().map(|r| r.plain_psnr_db)),
        rec_loss: mean(records.iter().map(|r| r.rec_loss)),
        decaled: (!decaled.is_empty()).then(|| SubsetStats {
            count: decaled.len(),
            psnr_db: mean(decaled.iter().map(|r| r.psnr_db)),
            plain_psnr_db: mean(decaled.iter().map(|r| r.plain_psnr_db)),
        }),
        records,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("eval report: {e}")))
    }

    /// Human-readable summary.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let v = &self.variant;
        let _ = writeln!(s, "variant     N={}{}", v.iterations, if v.skip_alignment { ", alignment skipped" } else { "" });
        let _ = writeln!(s, "images      {}", self.images);
        let _ = writeln!(s, "PSNR        {:.2} dB  (no blend {:.2} dB)", self.psnr_db, self.plain_psnr_db);
        let _ = writeln!(s, "SSIM        {:.4}", self.ssim);
        let _ = writeln!(s, "AOA         {:.2}%", 100.0 * self.aoa);
        match self.mask_iou {
            Some(iou) => {
                let _ = writeln!(s, "mask IoU    {iou:.3}");
            }
            None => {
                let _ = writeln!(s, "mask IoU    n/a (no ground-truth masks)");
            }
        }
        let _ = writeln!(s, "L_rec       {:.4}", self.rec_loss);
        if let Some(d) = &self.decaled {
            let _ = writeln!(s, "decaled     {} images, PSNR {:.2} dB (no blend {:.2} dB)", d.count, d.psnr_db, d.plain_psnr_db);
        }
        s
    }
}
