use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use oodinv::data::make_dataset;
use oodinv::edit::fit_toy_directions;
use oodinv::io::write_image;
use oodinv::train::{init_checkpoint, EvalReport, TrainConfig};

fn oodinv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oodinv")).args(args).env_remove("OODINV_CHECKPOINT_DIR").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    ckpt: String,
    image: String,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let ckpt = init_checkpoint(&TrainConfig::reference()).unwrap();
    let path = root.join("model.ckpt");
    ckpt.save(&path).unwrap();
    let dirs = root.join("directions");
    std::fs::create_dir_all(&dirs).unwrap();
    for d in fit_toy_directions(&ckpt.model, 48, 1).unwrap() {
        d.save(&dirs).unwrap();
    }
    let sample = make_dataset(1, 3, 1.0, 32).unwrap().remove(0);
    let image = root.join("face.png");
    write_image(&sample.image, &image).unwrap();
    Fixture { _dir: dir, ckpt: path.to_string_lossy().into(), image: image.to_string_lossy().into(), root }
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

#[test]
fn help_documents_every_command() {
    for cmd in ["data", "train", "invert", "edit", "masks", "eval", "serve", "print-config"] {
        let o = oodinv(&[cmd, "--help"]);
        assert_eq!(code(&o), 0, "{cmd}");
        let text = String::from_utf8_lossy(&o.stdout);
        assert!(text.contains("--seed"), "{cmd} help lacks --seed");
    }
    let text = String::from_utf8_lossy(&oodinv(&["invert", "--help"]).stdout).into_owned();
    for flag in ["--image", "--checkpoint", "--out", "--iters", "--skip-alignment"] {
        assert!(text.contains(flag), "{flag}");
    }
    assert_eq!(code(&oodinv(&["frobnicate"])), 2);
}

#[test]
fn print_config_round_trips() {
    let o = oodinv(&["print-config"]);
    assert_eq!(code(&o), 0);
    let cfg = TrainConfig::from_toml(&String::from_utf8_lossy(&o.stdout)).unwrap();
    assert_eq!(cfg, TrainConfig::reference());
    let o = oodinv(&["print-config", "--preset", "full", "--seed", "9"]);
    let cfg = TrainConfig::from_toml(&String::from_utf8_lossy(&o.stdout)).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.net.output_resolution, 64);
    let o = oodinv(&["train", "--print-config"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn invert_writes_the_documented_files() {
    let f = fixture();
    let out = f.root.join("inv");
    let o = oodinv(&["invert", "--image", &f.image, "--checkpoint", &f.ckpt, "--out", &s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(listing(&out), ["blended.png", "inversion.png", "mask_gathered.png", "mask_r16.png", "mask_r8.png", "metrics.json"]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    for k in ["psnr_db", "ssim", "aoa", "checkpoint_id"] {
        assert!(!m[k].is_null(), "{k}");
    }
    let first = std::fs::read(out.join("blended.png")).unwrap();
    assert_eq!(code(&oodinv(&["invert", "--image", &f.image, "--checkpoint", &f.ckpt, "--out", &s(&out)])), 0);
    assert_eq!(std::fs::read(out.join("blended.png")).unwrap(), first, "re-running must overwrite identically");

    let skip = f.root.join("skip");
    let o = oodinv(&["invert", "--image", &f.image, "--checkpoint", &f.ckpt, "--out", &s(&skip), "--skip-alignment", "--iters", "1"]);
    assert_eq!(code(&o), 0);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(skip.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["skip_alignment"], true);
    assert_eq!(m["iterations"], 1);

    let masks = f.root.join("masks");
    assert_eq!(code(&oodinv(&["masks", "--image", &f.image, "--checkpoint", &f.ckpt, "--out", &s(&masks)])), 0);
    assert_eq!(listing(&masks), ["mask_gathered.png", "mask_r16.png", "mask_r8.png"]);
}

#[test]
fn invalid_invocations_exit_with_2_before_writing() {
    let f = fixture();
    let out = f.root.join("never");
    let o = oodinv(&["invert", "--image", &f.image, "--out", &s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--checkpoint"), "{}", stderr(&o));
    let o = oodinv(&["invert", "--image", &f.image, "--checkpoint", "missing.ckpt", "--out", &s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--checkpoint"));
    let o = oodinv(&["invert", "--image", "nope.png", "--checkpoint", &f.ckpt, "--out", &s(&out)]);
    assert_eq!(code(&o), 2);
    let o = oodinv(&["invert", "--image", &f.image, "--checkpoint", &f.ckpt, "--out", &s(&out), "--iters", "0"]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists(), "nothing may be written for an invalid invocation");

    let corrupt = f.root.join("corrupt.ckpt");
    std::fs::write(&corrupt, b"OODINVCK garbage").unwrap();
    let o = oodinv(&["invert", "--image", &f.image, "--checkpoint", &s(&corrupt), "--out", &s(&out)]);
    assert_eq!(code(&o), 1, "a damaged checkpoint is a runtime failure");
}

#[test]
fn checkpoint_directory_from_the_environment() {
    let f = fixture();
    std::fs::copy(&f.ckpt, f.root.join("oodinv.ckpt")).unwrap();
    let out = f.root.join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_oodinv"))
        .args(["masks", "--image", &f.image, "--out", &s(&out)])
        .env("OODINV_CHECKPOINT_DIR", &f.root)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_oodinv"))
        .args(["masks", "--image", &f.image, "--out", &s(&out), "--checkpoint", "model.ckpt"])
        .current_dir(std::env::temp_dir())
        .env("OODINV_CHECKPOINT_DIR", &f.root)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn edit_identity_determinism_and_unknown_direction() {
    let f = fixture();
    let run = |out: &Path, strength: &str| {
        oodinv(&["edit", "--image", &f.image, "--checkpoint", &f.ckpt, "--out", &s(out), "--direction", "smile", "--strength", strength])
    };
    let zero = f.root.join("zero");
    let o = run(&zero, "0");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(zero.join("edited.png")).unwrap(), std::fs::read(zero.join("blended.png")).unwrap());
    assert!(listing(&zero).contains(&"edited.png".to_string()));

    let (a, b) = (f.root.join("a"), f.root.join("b"));
    assert_eq!(code(&run(&a, "-1.5")), 0);
    assert_eq!(code(&run(&b, "-1.5")), 0);
    for file in listing(&a) {
        assert_eq!(std::fs::read(a.join(&file)).unwrap(), std::fs::read(b.join(&file)).unwrap(), "{file}");
    }
    assert_ne!(std::fs::read(a.join("edited.png")).unwrap(), std::fs::read(zero.join("edited.png")).unwrap());

    let o = oodinv(&["edit", "--image", &f.image, "--checkpoint", &f.ckpt, "--out", &s(&a), "--direction", "wings"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("smile") && stderr(&o).contains("eye_size"), "{}", stderr(&o));
}

#[test]
fn data_and_eval() {
    let f = fixture();
    let data = f.root.join("data");
    let o = oodinv(&["data", "--out", &s(&data), "--count", "5", "--decal-rate", "0.6", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(listing(&data.join("images")).len(), 5);
    assert_eq!(code(&oodinv(&["data", "--out", &s(&data), "--count", "0"])), 2);

    let mut reports = Vec::new();
    for n in ["1", "3"] {
        let out = f.root.join(format!("report{n}.json"));
        let o = oodinv(&["eval", "--checkpoint", &f.ckpt, "--dataset", &s(&data), "--out", &s(&out), "--n-override", n, "--jobs", "2"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("PSNR"));
        let r = EvalReport::from_json(&std::fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(r.variant.iterations, n.parse::<usize>().unwrap());
        let mean = r.records.iter().map(|x| x.psnr_db).sum::<f64>() / r.records.len() as f64;
        assert!((r.psnr_db - mean).abs() < 1e-9);
        assert!(out.with_extension("txt").exists());
        reports.push(r);
    }
    assert!(reports[0].mask_iou.is_some());

    // Plain PNG folder: no masks, so IoU is absent.
    let plain = f.root.join("plain");
    std::fs::create_dir_all(&plain).unwrap();
    std::fs::copy(&f.image, plain.join("x.png")).unwrap();
    let out = f.root.join("plain.json");
    assert_eq!(code(&oodinv(&["eval", "--checkpoint", &f.ckpt, "--dataset", &s(&plain), "--out", &s(&out)])), 0);
    assert_eq!(EvalReport::from_json(&std::fs::read_to_string(&out).unwrap()).unwrap().mask_iou, None);

    let empty = f.root.join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let o = oodinv(&["eval", "--checkpoint", &f.ckpt, "--dataset", &s(&empty), "--out", &s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_runs_stages_in_order() {
    let f = fixture();
    let cfg = f.root.join("tiny.toml");
    std::fs::write(
        &cfg,
        "log_every = 1\n[data]\nclean_size = 8\ntrain_size = 4\neval_size = 2\n[a1]\nsteps = 2\nbatch_size = 2\n[a2]\nsteps = 2\nbatch_size = 2\n[b]\nsteps = 2\nbatch_size = 2\n",
    )
    .unwrap();
    let out = f.root.join("run").join("t.ckpt");
    std::fs::create_dir_all(out.parent().unwrap()).unwrap();
    let o = oodinv(&["train", "--config", &s(&cfg), "--out", &s(&out), "--stage", "b"]);
    assert_eq!(code(&o), 2, "stage b needs a1 and a2: {}", stderr(&o));
    let log = f.root.join("log.jsonl");
    let o = oodinv(&["train", "--config", &s(&cfg), "--out", &s(&out), "--stage", "a1", "--log", &s(&log)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = oodinv(&["train", "--config", &s(&cfg), "--out", &s(&out), "--resume", &s(&out), "--stage", "a2", "--stage", "b"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.parent().unwrap().join("directions").join("smile.dir.json").exists());
    let bad = f.root.join("bad.toml");
    std::fs::write(&bad, "[b]\nstepz = 1\n").unwrap();
    assert_eq!(code(&oodinv(&["train", "--config", &s(&bad), "--out", &s(&out)])), 2);
}
