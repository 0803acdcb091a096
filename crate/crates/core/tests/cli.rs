use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const DATA: &str = "synthetic:seed=7,n=4,size=32,classes=4";

const TINY: &str = r#"
baseline = "H"
[model]
image_filters = 4
semantic_filters = 2
disc_filters = 4
[attention]
n_channels = 3
[run]
steps = 2
batch_size = 2
checkpoint_every = 1
"#;

fn selgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selgan")).args(args).output().unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr is empty");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {line}"))
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let cfg = tiny_config(dir);
    let out = dir.join(out).display().to_string();
    let mut args = vec!["train", "--config", &cfg, "--data", DATA, "--out", &out, "--seed", "1"];
    args.extend_from_slice(extra);
    selgan(&args)
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn help_exits_zero() {
    let out = selgan(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("dump-attention"));
}

#[test]
fn missing_argument_is_a_usage_error() {
    let out = selgan(&["train", "--config", "desk", "--out", "x", "--seed", "0"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "usage");
    assert!(err["message"].as_str().unwrap().contains("--data"));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlambda_9 = 2.0\n").unwrap();
    let out = selgan(&["train", "--config", &s(&cfg), "--data", DATA, "--out", &s(dir.path()), "--seed", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("lambda_9"));
}

#[test]
fn zero_epoch_training_writes_a_reproducible_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = train(dir.path(), name, &["--epochs", "0"]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read(dir.path().join("a/latest.sgck")).unwrap();
    let b = fs::read(dir.path().join("b/latest.sgck")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn resume_continues_the_run() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train(dir.path(), "r", &["--steps", "1"]).status.code(), Some(0));
    let out = train(dir.path(), "r", &["--steps", "2", "--resume"]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["steps"], 2);
    let log = fs::read_to_string(dir.path().join("r/losses.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let cfg = tiny_config(dir.path());
    let wrong_seed = selgan(&["train", "--config", &cfg, "--data", DATA, "--out", &s(&dir.path().join("r")), "--seed", "9", "--resume"]);
    assert_eq!(wrong_seed.status.code(), Some(1));
}

fn synth(dir: &Path) -> PathBuf {
    let out = dir.join("synth");
    let r = selgan(&["synth", "--spec", DATA, "--out", &s(&out)]);
    assert_eq!(r.status.code(), Some(0));
    out
}

#[test]
fn generate_writes_one_image_per_semantic_map() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train(dir.path(), "m", &[]).status.code(), Some(0));
    let data = synth(dir.path());
    let ckpt = s(&dir.path().join("m/latest.sgck"));
    let image = s(&data.join("synth_00000_condition.png"));
    let sems: Vec<String> = (0..3).map(|i| s(&data.join(format!("synth_{i:05}_semantic.png")))).collect();
    let out = dir.path().join("gen");
    let mut args = vec!["generate", "--checkpoint", &ckpt, "--image", &image, "--out"];
    let out_s = s(&out);
    args.push(&out_s);
    args.push("--semantic");
    args.extend(sems.iter().map(String::as_str));
    let r = selgan(&args);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    for i in 0..3 {
        assert!(out.join(format!("synth_{i:05}_semantic.png")).exists());
    }

    args.push("--dump-internals");
    assert_eq!(selgan(&args).status.code(), Some(0));
    let internals = out.join("synth_00000_semantic_internals");
    let count = |prefix: &str| {
        fs::read_dir(&internals)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with(prefix))
            .count()
    };
    assert_eq!(count("attention_"), 3);
    assert_eq!(count("intermediate_"), 3);
    assert_eq!(count("uncertainty_"), 2);

    let dump = dir.path().join("dump");
    let r = selgan(&["dump-attention", "--checkpoint", &ckpt, "--image", &image, "--semantic", &sems[0], "--out", &s(&dump)]);
    assert_eq!(r.status.code(), Some(0));
    assert_eq!(fs::read_dir(&dump).unwrap().count(), fs::read_dir(&internals).unwrap().count());

    let bad = selgan(&["generate", "--checkpoint", &image, "--image", &image, "--semantic", &sems[0], "--out", &out_s]);
    assert_eq!(bad.status.code(), Some(2));
    assert_eq!(stderr_json(&bad)["error"], "runtime");
}

#[test]
fn evaluate_pairs_by_name_and_scores_identical_sets_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let real = dir.path().join("real");
    fs::create_dir_all(&real).unwrap();
    for i in 0..4 {
        fs::copy(data.join(format!("synth_{i:05}_target.png")), real.join(format!("synth_{i:05}.png"))).unwrap();
    }
    let target = s(&real);
    let clf = dir.path().join("clf.json");
    let r = selgan(&["train-classifier", "--data", DATA, "--out", &s(&clf), "--iterations", "50"]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));

    let out = dir.path().join("eval");
    let r = selgan(&[
        "evaluate", "--real-dir", &target, "--fake-dir", &target, "--metrics", "ssim,psnr,kl", "--classifier",
        &s(&clf), "--out", &s(&out),
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!((m["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(m["kl_mean"].as_f64().unwrap().abs() < 1e-12);
    assert_eq!(m["n_images"], 4);
    let csv = fs::read_to_string(out.join("per_image.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let r = selgan(&["evaluate", "--real-dir", &target, "--fake-dir", &target, "--metrics", "ssim"]);
    let m: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    let keys: Vec<&String> = m.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["n_images", "ssim"]);

    let partial = dir.path().join("partial");
    fs::create_dir_all(&partial).unwrap();
    fs::copy(real.join("synth_00000.png"), partial.join("synth_00000.png")).unwrap();
    let r = selgan(&["evaluate", "--real-dir", &target, "--fake-dir", &s(&partial), "--metrics", "ssim"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(stderr_json(&r)["message"].as_str().unwrap().contains("synth_00001"));
}

#[test]
fn ablate_and_sweep_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = s(&dir.path().join("tables"));
    let common = ["--config", cfg.as_str(), "--data", DATA, "--steps", "1", "--out", out.as_str()];

    let mut args = vec!["ablate", "--baselines", "A,C,H"];
    args.extend_from_slice(&common);
    assert_eq!(selgan(&args).status.code(), Some(0));
    let table = fs::read_to_string(dir.path().join("tables/ablation.csv")).unwrap();
    let labels: Vec<&str> = table.lines().skip(1).map(|l| &l[..1]).collect();
    assert_eq!(labels, ["A", "C", "H"]);

    let mut args = vec!["ablate", "--baselines", "A,Q"];
    args.extend_from_slice(&common);
    assert_eq!(selgan(&args).status.code(), Some(1));

    let mut args = vec!["sweep", "--n", "0,1,5,10"];
    args.extend_from_slice(&common);
    assert_eq!(selgan(&args).status.code(), Some(0));
    let table = fs::read_to_string(dir.path().join("tables/sweep.csv")).unwrap();
    assert!(table.starts_with("n,ssim,psnr,sd\n"));
    assert_eq!(table.lines().count(), 5);
}
