//! End-to-end checks of the `tempo` binary: exit codes, determinism,
//! file outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tempo() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tempo"))
}

fn run(args: &[&str]) -> Output {
    tempo().args(args).output().expect("binary runs")
}

fn small_config(dir: &Path, samples: usize, epochs: usize) -> PathBuf {
    let path = dir.join("cfg.json");
    let text = format!(
        r#"{{"samples": {samples}, "train": {{"epochs": {epochs}, "eval_samples": 16}}}}"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn sha256(path: &Path) -> String {
    // no hashing dependency; compare raw bytes instead
    let bytes = std::fs::read(path).unwrap();
    format!("{}:{:x}", bytes.len(), bytes.iter().fold(0u64, |acc, &b| acc.wrapping_mul(131).wrapping_add(b as u64)))
}

#[test]
fn gen_is_deterministic_and_header_matches_profile() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 12, 1);
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");

    for out in [&out_a, &out_b] {
        let r = run(&[
            "gen",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "42",
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    assert_eq!(
        sha256(&out_a.join("dataset.tmpo")),
        sha256(&out_b.join("dataset.tmpo"))
    );

    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("dataset.tmpo.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["n_seq"], 4);
    assert_eq!(meta["p"], 8);
    assert_eq!(meta["d"], 32);

    // resolved config echoed
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 42);
    assert_eq!(resolved["samples"], 12);
}

#[test]
fn gen_rejects_more_objects_than_proposals() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"scene": {"objects": 10}}"#).unwrap();
    let r = run(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("objects") && err.contains("proposals"), "stderr: {err}");
}

#[test]
fn train_missing_dataset_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let r = run(&[
        "train",
        "--out",
        tmp.path().join("o").to_str().unwrap(),
        "--data",
        tmp.path().join("nope.tmpo").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn bench_requires_three_lengths_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let r = run(&[
        "bench",
        "--out",
        tmp.path().join("o").to_str().unwrap(),
        "--n-list",
        "4",
    ]);
    assert_eq!(r.status.code(), Some(2));

    let flops_column = |out: &Path| -> Vec<String> {
        std::fs::read_to_string(out.join("scaling.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.split(',').nth(1).unwrap().to_string())
            .collect()
    };
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    for out in [&out_a, &out_b] {
        let r = run(&[
            "bench",
            "--out",
            out.to_str().unwrap(),
            "--n-list",
            "2,3,4",
            "--reps",
            "1",
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    assert_eq!(flops_column(&out_a), flops_column(&out_b));
}

#[test]
fn bench_paper_profile_counted_ratio_is_subquadratic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    // reps 0 skips wall timing; counted FLOPs are what matters here
    let r = run(&[
        "bench",
        "--profile",
        "paper",
        "--out",
        out.to_str().unwrap(),
        "--n-list",
        "4,6,8",
        "--reps",
        "0",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(out.join("scaling.csv")).unwrap();
    let flops: Vec<f64> = text
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let ratio = flops[2] / flops[0];
    assert!(ratio < 4.0, "ratio {ratio}");
    assert!((ratio / 2.61 - 1.0).abs() <= 0.30, "ratio {ratio} vs 2.61");
}

#[test]
fn eval_untrained_checkpoint_reports_and_mismatched_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let cfg = small_config(tmp.path(), 24, 0);

    let r = run(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    // epochs = 0 saves the untrained model and evaluates it
    let r = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let ckpt = out.join("ckpt-init.tmpc");
    assert!(ckpt.exists());

    let r = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        out.join("dataset.tmpo").to_str().unwrap(),
        "--bruteforce",
        "--topk",
        "3",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let report: serde_json::Value = serde_json::from_str(&String::from_utf8_lossy(&r.stdout)).unwrap();
    let exact = report["exact_match"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&exact));
    assert!(report["greedy_bruteforce_agreement"].as_f64().is_some());
    assert!(report["retrieval_topk"]["accuracy"].as_f64().is_some());
    assert!(out.join("ordering.json").exists());

    // a paper-profile model cannot read a desk checkpoint
    let r = run(&[
        "eval",
        "--profile",
        "paper",
        "--out",
        out.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        out.join("dataset.tmpo").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("config mismatch on D"), "stderr: {err}");
}

#[test]
fn train_then_resume_continues_from_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out_full = tmp.path().join("full");
    let out_part = tmp.path().join("part");
    let cfg_full = small_config(tmp.path(), 32, 2);

    let r = run(&[
        "gen",
        "--config",
        cfg_full.to_str().unwrap(),
        "--out",
        out_full.to_str().unwrap(),
    ]);
    assert!(r.status.success());
    std::fs::create_dir_all(&out_part).unwrap();
    std::fs::copy(out_full.join("dataset.tmpo"), out_part.join("dataset.tmpo")).unwrap();

    let r = run(&[
        "train",
        "--config",
        cfg_full.to_str().unwrap(),
        "--out",
        out_full.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    // run only the first epoch, then resume for the second
    let cfg_short = tmp.path().join("cfg1.json");
    std::fs::write(&cfg_short, r#"{"samples": 32, "train": {"epochs": 1, "eval_samples": 16}}"#).unwrap();
    let r = run(&[
        "train",
        "--config",
        cfg_short.to_str().unwrap(),
        "--out",
        out_part.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let r = run(&[
        "train",
        "--config",
        cfg_full.to_str().unwrap(),
        "--out",
        out_part.to_str().unwrap(),
        "--resume",
        out_part.join("ckpt-0000.tmpc").to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    // final checkpoints agree byte for byte
    assert_eq!(
        sha256(&out_full.join("ckpt-0001.tmpc")),
        sha256(&out_part.join("ckpt-0001.tmpc"))
    );
}
