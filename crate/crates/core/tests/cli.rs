//! The `advgame` binary end to end on a very small desk configuration.

use std::path::Path;
use std::process::{Command, Output};

use advgame::cli::{ExperimentConfig, RESOLVED_NAME};

const SMALL: &[&str] = &[
    "--set", "classes=4",
    "--set", "image_side=8",
    "--set", "train_per_class=6",
    "--set", "eval_per_class=3",
    "--set", "outer_iterations=2",
    "--set", "inner_steps=3",
    "--set", "batch_size=8",
    "--set", "lr_milestones=4",
    "--set", "attack_iterations=2",
    "--set", "attack_batch_size=8",
    "--set", "eval_iterations=3",
    "--set", "patch_iterations=2",
    "--set", "eval_patch_iterations=2",
    "--set", "patch_batch_size=4",
];

fn advgame(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advgame"))
        .args(args)
        .args(SMALL)
        .arg("--out-dir")
        .arg(out)
        .env_remove("ADVGAME_OUT_DIR")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn train_sgd_then_eval_writes_rows_per_split() {
    let dir = tempfile::tempdir().unwrap();
    ok(&advgame(dir.path(), &["train-sgd"]));
    assert!(dir.path().join("checkpoints/iter_0001.ckpt").exists());
    assert!(dir.path().join("checkpoints/iter_0002.ckpt").exists());
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("iter,loss,batch_acc,lr,pool_size,seconds\n"));
    ok(&advgame(dir.path(), &["eval"]));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iter,split,clean_acc,adv_acc,attack,seconds");
    assert_eq!(lines.len(), 1 + 2 * 3);
    let splits: Vec<&str> = lines[1..4].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(splits, ["train", "valid", "test"]);
}

#[test]
fn resolved_config_re_parses_identically() {
    let dir = tempfile::tempdir().unwrap();
    ok(&advgame(dir.path(), &["train-sgd", "--set", "learning_rate=0.03", "--seed", "17"]));
    let text = std::fs::read_to_string(dir.path().join(RESOLVED_NAME)).unwrap();
    let cfg = ExperimentConfig::parse(&text).unwrap();
    assert_eq!(cfg.seed, 17);
    assert_eq!(cfg.learning_rate, 0.03);
    assert_eq!(cfg.out_dir, dir.path());
    assert_eq!(cfg.render(), text);
}

#[test]
fn flag_overrides_file_value() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    std::fs::write(&file, "seed = 3\nmomentum = 0.5\n").unwrap();
    let out = dir.path().join("out");
    let f = file.to_str().unwrap();
    ok(&advgame(&out, &["train-sgd", "--config", f, "--set", "momentum=0.7"]));
    let cfg = ExperimentConfig::load(&out.join(RESOLVED_NAME)).unwrap();
    assert_eq!((cfg.seed, cfg.momentum), (3, 0.7));
}

#[test]
fn train_fp_and_attack_save_perturbations() {
    let dir = tempfile::tempdir().unwrap();
    ok(&advgame(dir.path(), &["train-fp"]));
    assert!(dir.path().join("perturbations/xi_0002.pert").exists());
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert!(log.lines().nth(2).unwrap().split(',').nth(4) == Some("2"));
    let stdout = ok(&advgame(dir.path(), &["attack", "--kind", "patch", "--target-class", "3", "--lambda", "1.0"]));
    assert!(stdout.contains("target_rate="), "{stdout}");
    let pert = dir.path().join("attack_patch.pert");
    assert!(pert.exists());
    let ppm = dir.path().join("patch.ppm");
    ok(&advgame(dir.path(), &["export-ppm", "--input", pert.to_str().unwrap(), "--output", ppm.to_str().unwrap()]));
    assert!(std::fs::read(&ppm).unwrap().starts_with(b"P6\n"));
}

#[test]
fn train_at_runs() {
    let dir = tempfile::tempdir().unwrap();
    ok(&advgame(dir.path(), &["train-at", "--set", "pgd_steps=1"]));
    assert!(dir.path().join("checkpoints/iter_0002.ckpt").exists());
}

#[test]
fn identical_cli_runs_give_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(&advgame(d, &["train-fp"]));
        ok(&advgame(d, &["eval"]));
    }
    for f in ["checkpoints/iter_0001.ckpt", "checkpoints/iter_0002.ckpt", "perturbations/xi_0001.pert", "train_log.csv", "metrics.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn matrix_demo_prints_near_uniform_strategies() {
    let out = Command::new(env!("CARGO_BIN_EXE_advgame"))
        .args(["matrix-demo", "--game", "rps", "--iters", "50000"])
        .output()
        .unwrap();
    let text = ok(&out);
    let row = text.lines().find(|l| l.starts_with("row_strategy")).unwrap();
    for v in row.split_whitespace().skip(1) {
        assert!((v.parse::<f64>().unwrap() - 1.0 / 3.0).abs() <= 0.05, "{row}");
    }
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |o: Output| (o.status.code(), String::from_utf8_lossy(&o.stderr).lines().count());
    assert_eq!(code(advgame(dir.path(), &["train-sgd", "--set", "no_such_key=1"])), (Some(2), 1));
    assert_eq!(code(advgame(dir.path(), &["train-sgd", "--set", "seed=x"])), (Some(2), 1));
    let missing = dir.path().join("absent.cfg");
    assert_eq!(code(advgame(dir.path(), &["train-sgd", "--config", missing.to_str().unwrap()])), (Some(3), 1));
    let bad = dir.path().join("bad.pert");
    std::fs::write(&bad, b"not a perturbation").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_advgame"))
        .args(["export-ppm", "--input", bad.to_str().unwrap(), "--output", "x.ppm"])
        .output()
        .unwrap();
    assert_eq!(code(o), (Some(3), 1));
    assert_eq!(code(advgame(dir.path(), &["train-sgd", "--set", "learning_rate=nan"])), (Some(2), 1));
    assert_eq!(code(advgame(dir.path(), &["train-sgd", "--set", "learning_rate=1e200"])), (Some(4), 1));
}
