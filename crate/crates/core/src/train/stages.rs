//! The three training stages. Each works on a [`Checkpoint`] so model
//! weights and optimizer state travel together.

use std::collections::BTreeMap;

use ndarray::Axis;
use oodinv_tensor::init::{randn, rng, Rng64};
use oodinv_tensor::optim::Adam;
use oodinv_tensor::{backward, no_grad, Array, Gradients, Module, Var};
use rand::Rng;
use serde_json::{Map, Value};

use super::checkpoint::{param_hash, Checkpoint, Stage};
use super::config::TrainConfig;
use super::log::TrainLog;
use super::metrics::psnr;
use crate::data::{child_seed, make_dataset, Sample};
use crate::error::{ensure, Error, Result};
use crate::losses::{adversarial_losses, r1_penalty, rec_loss, total_loss, LossNets, LossReport};
use crate::nets::ImageTensor;

/// Start and end values of the headline quantity of a stage.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub steps: usize,
    pub metrics: Map<String, Value>,
}

impl StageSummary {
    pub fn get(&self, key: &str) -> f64 {
        self.metrics.get(key).and_then(Value::as_f64).unwrap_or(f64::NAN)
    }
}

fn stage_rng(cfg: &TrainConfig, stage: Stage, step: usize) -> Rng64 {
    rng(child_seed(child_seed(cfg.seed, stage as u64 + 11), step as u64))
}

fn pick_batch(r: &mut Rng64, n: usize, b: usize) -> Vec<usize> {
    (0..b).map(|_| r.random_range(0..n)).collect()
}

fn stack(images: &[ImageTensor], idx: &[usize]) -> Var {
    let views: Vec<_> = idx.iter().map(|&i| images[i].pixels().view()).collect();
    Var::constant(ndarray::stack(Axis(0), &views).unwrap().into_dyn())
}

fn finite(name: &str, v: &Var, stage: Stage, step: usize) -> Result<f64> {
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::Diverged(format!("{name} is {x} at {} step {step}", stage.name())));
    }
    Ok(x)
}

fn optimizer<'a>(opts: &'a mut BTreeMap<String, Adam>, key: &str, cfg: &super::config::StageConfig) -> &'a mut Adam {
    let adam = opts.entry(key.to_string()).or_insert_with(|| Adam::new(cfg.adam()));
    adam.config = cfg.adam();
    adam
}

fn bump_steps(ckpt: &mut Checkpoint, stage: &str, steps: usize) {
    let key = format!("{stage}_steps");
    let done = ckpt.info.get(&key).and_then(Value::as_u64).unwrap_or(0);
    ckpt.info.insert(key, (done + steps as u64).into());
}

/// Clean faces used by the generator and encoder stages.
pub fn clean_faces(cfg: &TrainConfig) -> Result<Vec<ImageTensor>> {
    let set = make_dataset(cfg.data.clean_size, child_seed(cfg.data.seed, 0), 0.0, cfg.net.output_resolution)?;
    Ok(set.into_iter().map(|s| s.image).collect())
}

/// Decaled training set of the alignment stage.
pub fn alignment_train_set(cfg: &TrainConfig) -> Result<Vec<Sample>> {
    make_dataset(cfg.data.train_size, child_seed(cfg.data.seed, 1), cfg.data.decal_rate, cfg.net.output_resolution)
}

/// Held-out evaluation set.
pub fn eval_set(cfg: &TrainConfig) -> Result<Vec<Sample>> {
    make_dataset(cfg.data.eval_size.max(1), child_seed(cfg.data.seed, 2), cfg.data.decal_rate, cfg.net.output_resolution)
}

fn latents(ckpt: &Checkpoint, n: usize, seed: u64, truncation: f64) -> Var {
    let d = ckpt.model.net.style_dim;
    let z = Var::constant(randn(&mut rng(seed), &[n, d]));
    no_grad(|| ckpt.model.generator.map_var(&z, truncation))
}

/// Mean squared distance of generated samples to the mean dataset image.
fn distance_to_mean(ckpt: &Checkpoint, mean_image: &Array, cfg: &TrainConfig) -> Result<f64> {
    let w = latents(ckpt, 64, child_seed(cfg.seed, 901), 1.0);
    let img = no_grad(|| ckpt.model.generator.synthesize_var(&w, None))?.image;
    let diff = img.value() - &mean_image.view().insert_axis(Axis(0));
    Ok(diff.mapv(|v| v * v).mean().unwrap())
}

fn grads_norm(m: &dyn Module, g: &Gradients) -> f64 {
    let mut total = 0.0;
    m.visit("", &mut |_, p| {
        if let Some(a) = g.get(p.var()) {
            total += a.iter().map(|v| v * v).sum::<f64>();
        }
    });
    total.sqrt()
}

/// One critic update on `real` against detached `fake`. Returns the
/// critic loss and the R1 value when it was evaluated.
fn critic_step(ckpt: &mut Checkpoint, key: &str, cfg: &TrainConfig, stage_cfg: &super::config::StageConfig, real: &Var, fake: &Var, step: usize, stage: Stage) -> Result<(f64, Option<f64>)> {
    ckpt.model.discriminator.set_trainable(true);
    let fake_logits = ckpt.model.discriminator.forward(fake)?;
    let lazy = step % cfg.r1_interval == 0 && cfg.loss.r1_gamma > 0.0;
    let (d_loss, r1) = if lazy {
        let (pen, real_logits) = r1_penalty(&ckpt.model.discriminator, real)?;
        // Scaled by the interval so the average penalty matches R1 every step.
        let scaled = pen.scale(cfg.r1_interval as f64);
        let (_, d) = adversarial_losses(&real_logits, &fake_logits, Some(&scaled), cfg.loss.r1_gamma)?;
        (d, Some(pen.item()))
    } else {
        let real_logits = ckpt.model.discriminator.forward(real)?;
        (adversarial_losses(&real_logits, &fake_logits, None, 0.0)?.1, None)
    };
    let value = finite("critic loss", &d_loss, stage, step)?;
    let g = backward(&d_loss);
    optimizer(&mut ckpt.optimizers, key, stage_cfg).step(&mut ckpt.model.discriminator, &g);
    Ok((value, r1))
}

/// Adversarial training of the generator and critic on clean faces.
pub fn train_stage_a1(ckpt: &mut Checkpoint, cfg: &TrainConfig, log: &mut TrainLog) -> Result<StageSummary> {
    cfg.validate()?;
    ensure!(ckpt.model.net == cfg.net, Validation, "checkpoint architecture differs from the configuration");
    let faces = clean_faces(cfg)?;
    let mean_image = ImageTensor::stack_array(&faces).mean_axis(Axis(0)).unwrap();
    let initial = distance_to_mean(ckpt, &mean_image, cfg)?;
    log.header("a1", cfg, &["d_loss", "g_loss", "r1"])?;
    let s = &cfg.a1;
    let d = cfg.net.style_dim;
    let mut last = (f64::NAN, f64::NAN);
    for step in 0..s.steps {
        let mut r = stage_rng(cfg, Stage::A1, step);
        let real = stack(&faces, &pick_batch(&mut r, faces.len(), s.batch_size));
        let z1 = Var::constant(randn(&mut r, &[s.batch_size, d]));
        let z2 = Var::constant(randn(&mut r, &[s.batch_size, d]));

        let fake = no_grad(|| ckpt.model.generator.synthesize_var(&ckpt.model.generator.map_var(&z1, 1.0), None))?.image;
        let (d_loss, r1) = critic_step(ckpt, "a1.discriminator", cfg, s, &real, &fake, step, Stage::A1)?;

        ckpt.model.discriminator.set_trainable(false);
        ckpt.model.generator.set_trainable(true);
        let w = ckpt.model.generator.map_var(&z2, 1.0);
        let img = ckpt.model.generator.synthesize_var(&w, None)?.image;
        let g_loss = ckpt.model.discriminator.forward(&img)?.neg().softplus().mean();
        let g_value = finite("generator loss", &g_loss, Stage::A1, step)?;
        let g = backward(&g_loss);
        optimizer(&mut ckpt.optimizers, "a1.generator", s).step(&mut ckpt.model.generator, &g);
        let w_now = w.value().index_axis(Axis(1), 0).to_owned().into_dyn();
        ckpt.model.generator.mapping.track(&w_now, cfg.w_avg_decay);
        last = (d_loss, g_value);
        log.maybe_snapshot(ckpt, "a1", step, cfg.checkpoint_every)?;

        if step % cfg.log_every == 0 || step + 1 == s.steps {
            let mut rec = Map::new();
            rec.insert("d_loss".into(), d_loss.into());
            rec.insert("g_loss".into(), g_value.into());
            if let Some(p) = r1 {
                rec.insert("r1".into(), p.into());
            }
            log.step("a1", step, rec)?;
        }
    }
    ckpt.model.discriminator.set_trainable(true);
    ckpt.mark_stage(Stage::A1);
    bump_steps(ckpt, "a1", cfg.a1.steps);
    let fin = distance_to_mean(ckpt, &mean_image, cfg)?;
    let mut metrics = Map::new();
    metrics.insert("initial_mean_distance".into(), initial.into());
    metrics.insert("final_mean_distance".into(), fin.into());
    metrics.insert("final_d_loss".into(), last.0.into());
    metrics.insert("final_g_loss".into(), last.1.into());
    log.note("a1", metrics.clone())?;
    Ok(StageSummary { stage: Stage::A1, steps: s.steps, metrics })
}

/// Median absolute latent error and mean round-trip PSNR on fixed
/// generator samples.
pub fn encoder_probe(ckpt: &Checkpoint, cfg: &TrainConfig, n: usize) -> Result<(f64, f64)> {
    let w = latents(ckpt, n, child_seed(cfg.seed, 902), cfg.sample_truncation);
    no_grad(|| {
        let x = ckpt.model.generator.synthesize_var(&w, None)?.image;
        let (w_hat, _) = ckpt.model.encoder.encode_var(&x)?;
        let mut errs: Vec<f64> = (w_hat.value() - w.value()).iter().map(|v| v.abs()).collect();
        errs.sort_by(f64::total_cmp);
        let median = errs[errs.len() / 2];
        let x_hat = ckpt.model.generator.synthesize_var(&w_hat, None)?.image;
        let a = ImageTensor::unstack(&x)?;
        let b = ImageTensor::unstack(&x_hat)?;
        let p = a.iter().zip(&b).map(|(a, b)| psnr(a.pixels(), b.pixels())).sum::<f64>() / n as f64;
        Ok((median, p))
    })
}

/// Encoder training against the frozen generator: latent regression on
/// generated samples plus image reconstruction of generated and clean faces.
pub fn train_stage_a2(ckpt: &mut Checkpoint, cfg: &TrainConfig, log: &mut TrainLog) -> Result<StageSummary> {
    cfg.validate()?;
    ckpt.require(&[Stage::A1], "encoder training")?;
    let faces = clean_faces(cfg)?;
    let nets = LossNets::default();
    if !ckpt.optimizers.contains_key("a2.encoder") {
        let w_avg = ckpt.model.generator.mapping.w_avg.value().clone();
        ckpt.model.encoder.set_latent_base(&w_avg);
    }
    ckpt.model.generator.set_trainable(false);
    ckpt.model.encoder.set_trainable(true);
    let g_hash = param_hash(&ckpt.model.generator);
    let (lat0, psnr0) = encoder_probe(ckpt, cfg, 32)?;
    log.header("a2", cfg, &["latent", "rec", "rec_real", "loss"])?;
    let s = &cfg.a2;
    let half = (s.batch_size / 2).max(1);
    let d = cfg.net.style_dim;
    let mut first_latent = f64::NAN;
    let mut last_latent = f64::NAN;
    for step in 0..s.steps {
        let mut r = stage_rng(cfg, Stage::A2, step);
        let z = Var::constant(randn(&mut r, &[half, d]));
        let (w, x) = no_grad(|| -> Result<_> {
            let w = ckpt.model.generator.map_var(&z, cfg.sample_truncation);
            let x = ckpt.model.generator.synthesize_var(&w, None)?.image;
            Ok((w, x))
        })?;
        let (w_hat, _) = ckpt.model.encoder.encode_var(&x)?;
        let latent = w_hat.sub(&w).square().mean();
        let x_hat = ckpt.model.generator.synthesize_var(&w_hat, None)?.image;
        let rec = rec_loss(&nets, &x, &x_hat, &cfg.loss)?;
        let mut loss = latent.scale(cfg.a2_latent_weight).add(&rec);
        let mut rec_real_v = 0.0;
        if cfg.a2_real_weight > 0.0 {
            let real = stack(&faces, &pick_batch(&mut r, faces.len(), (s.batch_size - half).max(1)));
            let (wr, _) = ckpt.model.encoder.encode_var(&real)?;
            let xr = ckpt.model.generator.synthesize_var(&wr, None)?.image;
            let rec_real = rec_loss(&nets, &real, &xr, &cfg.loss)?;
            rec_real_v = rec_real.item();
            loss = loss.add(&rec_real.scale(cfg.a2_real_weight));
        }
        let value = finite("encoder loss", &loss, Stage::A2, step)?;
        let g = backward(&loss);
        optimizer(&mut ckpt.optimizers, "a2.encoder", s).step(&mut ckpt.model.encoder, &g);
        if step == 0 {
            first_latent = latent.item();
        }
        last_latent = latent.item();
        log.maybe_snapshot(ckpt, "a2", step, cfg.checkpoint_every)?;
        if step % cfg.log_every == 0 || step + 1 == s.steps {
            let mut rec_map = Map::new();
            rec_map.insert("latent".into(), latent.item().into());
            rec_map.insert("rec".into(), rec.item().into());
            rec_map.insert("rec_real".into(), rec_real_v.into());
            rec_map.insert("loss".into(), value.into());
            log.step("a2", step, rec_map)?;
        }
    }
    ensure!(param_hash(&ckpt.model.generator) == g_hash, Precondition, "generator weights changed during encoder training");
    ckpt.model.generator.set_trainable(true);
    ckpt.mark_stage(Stage::A2);
    bump_steps(ckpt, "a2", cfg.a2.steps);
    let (lat1, psnr1) = encoder_probe(ckpt, cfg, 32)?;
    let mut metrics = Map::new();
    metrics.insert("initial_latent_loss".into(), first_latent.into());
    metrics.insert("final_latent_loss".into(), last_latent.into());
    metrics.insert("initial_median_latent_error".into(), lat0.into());
    metrics.insert("final_median_latent_error".into(), lat1.into());
    metrics.insert("initial_roundtrip_psnr".into(), psnr0.into());
    metrics.insert("final_roundtrip_psnr".into(), psnr1.into());
    log.note("a2", metrics.clone())?;
    Ok(StageSummary { stage: Stage::A2, steps: s.steps, metrics })
}

/// Mean blended reconstruction loss over a fixed image set.
pub fn fixed_set_rec(ckpt: &Checkpoint, cfg: &TrainConfig, images: &[ImageTensor]) -> Result<f64> {
    let nets = LossNets::default();
    let mut total = 0.0;
    for chunk in images.chunks(8) {
        let x = ImageTensor::stack(chunk);
        let l = no_grad(|| -> Result<f64> {
            let fwd = ckpt.model.forward_var(&x, &cfg.samm)?;
            Ok(rec_loss(&nets, &x, &fwd.blended, &cfg.loss)?.item())
        })?;
        total += l * chunk.len() as f64;
    }
    Ok(total / images.len() as f64)
}

/// Alignment-module training with frozen encoder and generator. `train`
/// defaults to the configured decaled training set.
pub fn train_stage_b(ckpt: &mut Checkpoint, cfg: &TrainConfig, train: Option<&[Sample]>, log: &mut TrainLog) -> Result<StageSummary> {
    cfg.validate()?;
    ckpt.require(&[Stage::A1, Stage::A2], "alignment training")?;
    let owned;
    let train = match train {
        Some(t) => t,
        None => {
            owned = alignment_train_set(cfg)?;
            &owned
        }
    };
    ensure!(!train.is_empty(), Validation, "alignment training set is empty");
    let images: Vec<ImageTensor> = train.iter().map(|s| s.image.clone()).collect();
    let probe: Vec<ImageTensor> = images.iter().take(16).cloned().collect();
    let nets = LossNets::default();
    ckpt.model.samm.cfg = cfg.samm.clone();
    for l in &mut ckpt.model.samm.levels {
        l.max_displacement = cfg.samm.max_displacement;
    }
    ckpt.model.generator.set_trainable(false);
    ckpt.model.encoder.set_trainable(false);
    ckpt.model.samm.set_trainable(true);
    let frozen_hash = (param_hash(&ckpt.model.generator), param_hash(&ckpt.model.encoder));
    let rec0 = fixed_set_rec(ckpt, cfg, &probe)?;
    let res = cfg.net.align_resolutions.clone();
    let mut keys = vec!["per", "mse", "id", "rec", "adv_g", "adv_d", "mask", "total", "frozen_grad_norm"];
    let mean_keys: Vec<String> = res.iter().map(|r| format!("mask_mean_r{r}")).collect();
    keys.extend(mean_keys.iter().map(String::as_str));
    log.header("b", cfg, &keys)?;
    let s = &cfg.b;
    let mut last_report = LossReport::default();
    let mut mask_means = vec![0.0; res.len()];
    for step in 0..s.steps {
        let mut r = stage_rng(cfg, Stage::B, step);
        let x = stack(&images, &pick_batch(&mut r, images.len(), s.batch_size));

        ckpt.model.discriminator.set_trainable(false);
        let fwd = ckpt.model.forward_var(&x, &cfg.samm)?;
        let fake_logits = ckpt.model.discriminator.forward(&fwd.blended)?;
        let (total, mut report) = total_loss(&nets, &x, &fwd.blended, &fwd.masks, Some(&fake_logits), &cfg.loss)?;
        finite("total loss", &total, Stage::B, step)?;
        let g = backward(&total);
        let frozen_norm = grads_norm(&ckpt.model.generator, &g) + grads_norm(&ckpt.model.encoder, &g);
        ensure!(frozen_norm == 0.0, Precondition, "frozen encoder/generator received gradient norm {frozen_norm}");
        optimizer(&mut ckpt.optimizers, "b.samm", s).step(&mut ckpt.model.samm, &g);
        for (i, m) in fwd.masks.iter().enumerate() {
            mask_means[i] = m.value().mean().unwrap();
        }

        if !cfg.b_freeze_discriminator {
            let fake = fwd.blended.detach();
            let (d_loss, _) = critic_step(ckpt, "b.discriminator", cfg, s, &x, &fake, step, Stage::B)?;
            report.adv_d = d_loss;
        }
        last_report = report.clone();
        log.maybe_snapshot(ckpt, "b", step, cfg.checkpoint_every)?;
        if step % cfg.log_every == 0 || step + 1 == s.steps {
            let mut rec = report.to_record(&res);
            rec.insert("frozen_grad_norm".into(), frozen_norm.into());
            for (k, v) in mean_keys.iter().zip(&mask_means) {
                rec.insert(k.clone(), (*v).into());
            }
            log.step("b", step, rec)?;
        }
    }
    ckpt.model.discriminator.set_trainable(true);
    ensure!(
        (param_hash(&ckpt.model.generator), param_hash(&ckpt.model.encoder)) == frozen_hash,
        Precondition,
        "encoder or generator weights changed during alignment training"
    );
    ckpt.model.generator.set_trainable(true);
    ckpt.model.encoder.set_trainable(true);
    ckpt.mark_stage(Stage::B);
    bump_steps(ckpt, "b", cfg.b.steps);
    let rec1 = fixed_set_rec(ckpt, cfg, &probe)?;
    let mut metrics = Map::new();
    metrics.insert("initial_rec".into(), rec0.into());
    metrics.insert("final_rec".into(), rec1.into());
    metrics.insert("final_total".into(), last_report.total.into());
    for (k, v) in mean_keys.iter().zip(&mask_means) {
        metrics.insert(format!("final_{k}"), (*v).into());
    }
    log.note("b", metrics.clone())?;
    Ok(StageSummary { stage: Stage::B, steps: s.steps, metrics })
}

/// Runs whichever stages `stages` lists, in order, on one checkpoint.
pub fn train_stages(ckpt: &mut Checkpoint, cfg: &TrainConfig, stages: &[Stage], log: &mut TrainLog) -> Result<Vec<StageSummary>> {
    stages
        .iter()
        .map(|s| match s {
            Stage::A1 => train_stage_a1(ckpt, cfg, log),
            Stage::A2 => train_stage_a2(ckpt, cfg, log),
            Stage::B => train_stage_b(ckpt, cfg, None, log),
        })
        .collect()
}

/// Fresh, untrained checkpoint for a configuration.
pub fn init_checkpoint(cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    Ok(Checkpoint::new(crate::pipeline::Model::new(&cfg.net, cfg.samm.clone(), cfg.seed)?))
}

/// Discards a trained alignment module so stage B can start over on the
/// same generator and encoder. The critic is kept.
pub fn reset_alignment(ckpt: &mut Checkpoint, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    ensure!(ckpt.model.net == cfg.net, Validation, "checkpoint architecture differs from the configuration");
    ckpt.model.samm = crate::samm::Samm::new(&cfg.net, cfg.samm.clone(), cfg.seed.wrapping_add(2))?;
    ckpt.optimizers.retain(|k, _| !k.starts_with("b."));
    ckpt.stages.retain(|s| *s != Stage::B);
    ckpt.info.remove("b_steps");
    Ok(())
}
