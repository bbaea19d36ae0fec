use ndarray::Array3;
use oodinv::compose::blend;
use oodinv::data::make_dataset;
use oodinv::samm::GatheredMask;
use oodinv::train::metrics::{mask_iou, psnr, ssim, PSNR_CAP_DB};
use oodinv::train::*;
use oodinv::Error;
use oodinv_tensor::init::{rng, uniform};

fn tiny() -> TrainConfig {
    let mut cfg = TrainConfig::reference();
    cfg.data = DataConfig { clean_size: 8, train_size: 8, eval_size: 4, decal_rate: 0.75, seed: 3 };
    for s in [&mut cfg.a1, &mut cfg.a2, &mut cfg.b] {
        s.steps = 3;
        s.batch_size = 2;
    }
    cfg.log_every = 1;
    cfg
}

fn image(seed: u64) -> Array3<f64> {
    uniform(&mut rng(seed), &[3, 16, 16], -1.0, 1.0).into_dimensionality().unwrap()
}

#[test]
fn psnr_and_ssim_examples() {
    let a = image(1);
    assert_eq!(psnr(&a, &a), PSNR_CAP_DB);
    let x = Array3::from_elem((3, 8, 8), 0.1);
    let y = Array3::from_elem((3, 8, 8), 0.3);
    assert!((psnr(&x, &y) - 20.0).abs() < 1e-9);
    assert!((ssim(&a, &a) - 1.0).abs() < 1e-9);
    let s = ssim(&a, &image(2));
    assert!((-1.0..=1.0).contains(&s) && s < 0.5);
    assert!((s - ssim(&image(2), &a)).abs() < 1e-12);
    let shifted = a.mapv(|v| v * 0.5 + 0.2);
    assert!(ssim(&a, &shifted) < 1.0);
}

#[test]
fn iou_examples() {
    let gt = ndarray::array![[1.0, 1.0], [0.0, 0.0]];
    assert_eq!(mask_iou(&ndarray::array![[0.9, 0.6], [0.1, 0.2]], &gt, 0.5), Some(1.0));
    assert_eq!(mask_iou(&ndarray::array![[0.9, 0.1], [0.9, 0.2]], &gt, 0.5), Some(1.0 / 3.0));
    assert_eq!(mask_iou(&ndarray::array![[0.9, 0.1], [0.9, 0.2]], &ndarray::Array2::zeros((2, 2)), 0.5), None);
}

#[test]
fn exact_reconstruction_guard_case() {
    let s = make_dataset(4, 1, 1.0, 32).unwrap().remove(0);
    let m = GatheredMask::new(s.gt_mask.clone()).unwrap();
    let out = blend(&s.image, s.clean.as_ref().unwrap(), &m).unwrap();
    assert!(psnr(s.image.pixels(), out.pixels()) >= 60.0);
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = TrainConfig::reference();
    let text = cfg.to_toml();
    assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
    assert!(matches!(TrainConfig::from_toml("nonsense = 1"), Err(Error::Validation(_))));
    assert!(TrainConfig::from_toml("[samm]\niterations = 0").is_err());
    let partial = TrainConfig::from_toml("seed = 9").unwrap();
    assert_eq!(partial.seed, 9);
    assert_eq!(partial.net, TrainConfig::default().net);
}

#[test]
fn stages_enforce_their_order() {
    let cfg = tiny();
    let mut log = TrainLog::memory();
    let mut ckpt = init_checkpoint(&cfg).unwrap();
    assert!(matches!(train_stage_a2(&mut ckpt, &cfg, &mut log), Err(Error::Precondition(_))));
    assert!(matches!(train_stage_b(&mut ckpt, &cfg, None, &mut log), Err(Error::Precondition(_))));
    train_stage_a1(&mut ckpt, &cfg, &mut log).unwrap();
    let a1_bytes = ckpt.to_bytes().unwrap();
    let a1 = Checkpoint::from_bytes(&a1_bytes, Some(&cfg.net)).unwrap();
    let mut copy = a1.clone();
    match train_stage_b(&mut copy, &cfg, None, &mut log) {
        Err(Error::Precondition(msg)) => assert!(msg.contains("a2"), "{msg}"),
        other => panic!("expected a precondition error, got {:?}", other.map(|s| s.stage)),
    }
}

#[test]
fn tiny_pipeline_is_reproducible_and_respects_freezes() {
    let cfg = tiny();
    let run = || {
        let mut log = TrainLog::memory();
        let mut ckpt = init_checkpoint(&cfg).unwrap();
        let a1 = train_stage_a1(&mut ckpt, &cfg, &mut log).unwrap();
        let g_hash = param_hash(&ckpt.model.generator);
        let a2 = train_stage_a2(&mut ckpt, &cfg, &mut log).unwrap();
        assert_eq!(param_hash(&ckpt.model.generator), g_hash, "generator changed in a2");
        let e_hash = param_hash(&ckpt.model.encoder);
        let b = train_stage_b(&mut ckpt, &cfg, None, &mut log).unwrap();
        assert_eq!(param_hash(&ckpt.model.generator), g_hash, "generator changed in b");
        assert_eq!(param_hash(&ckpt.model.encoder), e_hash, "encoder changed in b");
        (ckpt.to_bytes().unwrap(), log, [a1, a2, b])
    };
    let (bytes, log, summaries) = run();
    let (again, _, _) = run();
    assert_eq!(bytes, again, "two seeded runs must produce identical checkpoints");

    assert_eq!(log.series("b", "frozen_grad_norm"), vec![0.0; 3]);
    assert_eq!(log.series("a1", "d_loss").len(), 3);
    for key in ["mask_mean_r8", "mask_mean_r16", "bin_r8", "area_r16", "total"] {
        assert_eq!(log.series("b", key).len(), 3, "{key}");
    }
    assert!(summaries[0].get("initial_mean_distance").is_finite());
    assert!(summaries[2].get("initial_rec").is_finite());

    let ckpt = Checkpoint::from_bytes(&bytes, None).unwrap();
    assert!(ckpt.has_stage(Stage::A1) && ckpt.has_stage(Stage::A2) && ckpt.has_stage(Stage::B));
    assert_eq!(ckpt.info["b_steps"], 3);
    for key in ["a1.generator", "a1.discriminator", "a2.encoder", "b.samm", "b.discriminator"] {
        assert!(ckpt.optimizers.contains_key(key), "{key}");
    }
}

#[test]
fn checkpoint_round_trip_and_tampering() {
    let cfg = tiny();
    let mut ckpt = init_checkpoint(&cfg).unwrap();
    train_stage_a1(&mut ckpt, &cfg, &mut TrainLog::memory()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    assert_eq!(loaded.optimizers.keys().collect::<Vec<_>>(), ckpt.optimizers.keys().collect::<Vec<_>>());
    assert_eq!(param_hash(&loaded.model.generator), param_hash(&ckpt.model.generator));
    assert_eq!(loaded.id().unwrap(), checkpoint_id(&std::fs::read(&path).unwrap()));

    let bytes = std::fs::read(&path).unwrap();
    // Flip a character inside the manifest.
    let text_pos = bytes.windows(6).position(|w| w == b"\"a1\"]," || w == b"\"stage").unwrap_or(40);
    let mut t = bytes.clone();
    t[text_pos + 2] ^= 0x01;
    assert!(matches!(Checkpoint::from_bytes(&t, None), Err(Error::Checkpoint(_))));
    let mut d = bytes.clone();
    let last = d.len() - 3;
    d[last] ^= 0x10;
    assert!(matches!(Checkpoint::from_bytes(&d, None), Err(Error::Checkpoint(_))));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8], None).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint", None).is_err());
    let mut other = cfg.net.clone();
    other.samm_hidden += 1;
    assert!(matches!(Checkpoint::from_bytes(&bytes, Some(&other)), Err(Error::Checkpoint(_))));
}

#[test]
fn snapshots_follow_the_cadence() {
    let mut cfg = tiny();
    cfg.checkpoint_every = 2;
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("snap.ckpt");
    let mut log = TrainLog::to_file(&dir.path().join("log.jsonl")).unwrap().with_snapshots(&snap);
    let mut ckpt = init_checkpoint(&cfg).unwrap();
    train_stage_a1(&mut ckpt, &cfg, &mut log).unwrap();
    assert!(snap.exists());
    let text = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["type"], "header");
    assert_eq!(lines.iter().filter(|l| l.get("snapshot").is_some()).count(), 1);
    assert_eq!(lines.last().unwrap()["type"], "summary");
}

#[test]
fn evaluation_is_pure_and_aggregates_its_records() {
    let cfg = tiny();
    let ckpt = init_checkpoint(&cfg).unwrap();
    let set = make_dataset(5, 4, 0.6, 32).unwrap();
    let opts = EvalOptions::default();
    let a = evaluate(&ckpt.model, &set, &opts).unwrap();
    let b = evaluate(&ckpt.model, &set, &opts).unwrap();
    assert_eq!(a, b);
    let par = evaluate(&ckpt.model, &set, &EvalOptions { jobs: 3, ..opts.clone() }).unwrap();
    assert_eq!(a, par, "result must not depend on the number of workers");

    let mean = |f: fn(&ImageRecord) -> f64| a.records.iter().map(f).sum::<f64>() / a.records.len() as f64;
    assert!((a.psnr_db - mean(|r| r.psnr_db)).abs() < 1e-9);
    assert!((a.ssim - mean(|r| r.ssim)).abs() < 1e-9);
    assert!((a.aoa - mean(|r| r.aoa)).abs() < 1e-9);
    assert!((a.rec_loss - mean(|r| r.rec_loss)).abs() < 1e-9);
    let ious: Vec<f64> = a.records.iter().filter_map(|r| r.mask_iou).collect();
    assert!((a.mask_iou.unwrap() - ious.iter().sum::<f64>() / ious.len() as f64).abs() < 1e-9);
    assert_eq!(a.decaled.as_ref().unwrap().count, 3);
    assert!((-1.0..=1.0).contains(&a.ssim) && (0.0..=1.0).contains(&a.aoa));
    assert_eq!(EvalReport::from_json(&a.to_json()).unwrap(), a);
    assert!(a.table().contains("AOA"));

    for n in [1, 3] {
        let r = evaluate(&ckpt.model, &set, &EvalOptions { iterations: Some(n), ..opts.clone() }).unwrap();
        assert_eq!(r.variant, Variant { iterations: n, skip_alignment: false });
    }
    let skip = evaluate(&ckpt.model, &set, &EvalOptions { skip_alignment: true, ..opts.clone() }).unwrap();
    assert!(skip.variant.skip_alignment);
    assert!(evaluate(&ckpt.model, &[], &opts).is_err());
}

#[test]
fn missing_masks_give_absent_iou_and_zero_masks_give_zero_area() {
    let cfg = tiny();
    let mut ckpt = init_checkpoint(&cfg).unwrap();
    let clean = make_dataset(3, 5, 0.0, 32).unwrap();
    let r = evaluate(&ckpt.model, &clean, &EvalOptions::default()).unwrap();
    assert_eq!(r.mask_iou, None);
    assert!(r.decaled.is_none());

    // Drive every mask logit to -inf territory.
    for level in &mut ckpt.model.samm.levels {
        let mut b = level.head.bias.value().clone();
        b[2] = -1e4;
        level.head.bias.set_value(b);
    }
    let r = evaluate(&ckpt.model, &clean, &EvalOptions::default()).unwrap();
    assert_eq!(r.aoa, 0.0);
    // A zero mask means the output is the generator image itself.
    for rec in &r.records {
        assert_eq!(rec.psnr_db, rec.plain_psnr_db);
    }
}

#[test]
fn overrides_apply_on_top_of_a_preset() {
    let base = TrainConfig::reference();
    let cfg = base.with_overrides("seed = 4\n[b]\nsteps = 7\n[loss]\nphi_area = [0.2, 0.2]").unwrap();
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.b.steps, 7);
    assert_eq!(cfg.b.batch_size, base.b.batch_size);
    assert_eq!(cfg.loss.phi_area, vec![0.2, 0.2]);
    assert_eq!(cfg.net, base.net);
    assert!(base.with_overrides("[b]\nstep = 7").is_err());
    assert_eq!(base.with_overrides("").unwrap(), base);
}
