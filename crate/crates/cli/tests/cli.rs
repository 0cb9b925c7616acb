use std::path::Path;
use std::process::{Command, Output};

fn lrgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrgan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_MODEL: &str = r#"{"stages": 2, "resolutions": [8, 16], "channels": [4, 4, 4], "noise_dim": 3,
    "metadata_dim": 4, "lrm_resolution": 8, "disc_channels": 2}"#;

fn write_config(dir: &Path, name: &str, train: &str) -> String {
    let out = dir.join(name.trim_end_matches(".json"));
    let text = format!(
        r#"{{"model": {TINY_MODEL}, "train": {train}, "data": {{"kind": "mirror", "count": 12, "seed": 2}}, "out_dir": {:?}}}"#,
        out.display().to_string()
    );
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn unknown_key_is_a_config_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"model": {"use_lmr": false}}"#).unwrap();
    let o = lrgan(&["train", "-c", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("model") && stderr(&o).contains("use_lmr"),
        "{}",
        stderr(&o)
    );

    std::fs::write(&path, r#"{"train": {"batch": 0}}"#).unwrap();
    assert_eq!(
        lrgan(&["train", "-c", path.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        lrgan(&["train", "-c", "/nonexistent/cfg.json"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn omitted_lambda3_is_echoed_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.json",
        r#"{"epochs": 1, "batch": 4, "eval_samples": 4}"#,
    );
    let o = lrgan(&["train", "-c", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("lambda3 50"), "{}", stdout(&o));
    let eff: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run/effective_config.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(eff["train"]["lambda3"], 50.0);
    assert_eq!(eff["train"]["lr"], 0.0002);
    for f in [
        "metrics.csv",
        "latest.lrgn",
        "ckpt_epoch001.lrgn",
        "samples_epoch001_stage2.ppm",
    ] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
}

#[test]
fn generate_eval_and_inspect_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.json",
        r#"{"epochs": 2, "batch": 4, "eval_samples": 4}"#,
    );
    assert!(lrgan(&["train", "-c", &cfg]).status.success());
    let ckpt = dir.path().join("run/latest.lrgn").display().to_string();

    let mut outputs = Vec::new();
    for out in ["a", "b"] {
        let out = dir.path().join(out).display().to_string();
        let o = lrgan(&[
            "generate", "--ckpt", &ckpt, "--n", "4", "--seed", "7", "--out", &out,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("generated 4 images per stage"));
        let files: Vec<Vec<u8>> = (0..4)
            .map(|i| std::fs::read(format!("{out}/stage2_{i:04}.ppm")).unwrap())
            .collect();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);

    let o = lrgan(&[
        "eval",
        "--ckpt",
        &ckpt,
        "--data",
        "mirror:8:2",
        "--samples",
        "6",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("epoch 2") && stdout(&o).contains("frechet_lite "));
    assert!(
        stdout(&o).contains("reference_symmetry_score 0.000000"),
        "{}",
        stdout(&o)
    );

    let o = lrgan(&["inspect", "--ckpt", &ckpt]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("generator.long_range"));

    let o = lrgan(&["eval", "--ckpt", &ckpt, "--data", "no-such-kind"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cli_resume_equals_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let train = r#"{"epochs": 4, "batch": 4, "eval_samples": 4, "eval_every": 1, "checkpoint_every": 2, "precision": "f64", "seed": 3}"#;
    let straight = write_config(dir.path(), "straight.json", train);
    assert!(lrgan(&["train", "-c", &straight]).status.success());

    let resumed = write_config(dir.path(), "resumed.json", train);
    let first = dir
        .path()
        .join("straight/ckpt_epoch002.lrgn")
        .display()
        .to_string();
    let o = lrgan(&["train", "-c", &resumed, "--resume", &first]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("resumed from") && stdout(&o).contains("at epoch 2"));
    assert_eq!(
        std::fs::read(dir.path().join("straight/latest.lrgn")).unwrap(),
        std::fs::read(dir.path().join("resumed/latest.lrgn")).unwrap()
    );
}

#[test]
fn diverging_training_exits_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.json",
        r#"{"epochs": 3, "batch": 4, "eval_samples": 4, "lr": 1e300}"#,
    );
    let o = lrgan(&["train", "-c", &cfg]);
    assert_eq!(o.status.code(), Some(1), "{}{}", stdout(&o), stderr(&o));
}

#[test]
fn ablate_writes_a_summary_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.json",
        r#"{"epochs": 1, "batch": 6, "eval_samples": 4}"#,
    );
    let root = dir.path().join("abl").display().to_string();
    let o = lrgan(&[
        "ablate",
        "-c",
        &cfg,
        "--modes",
        "full,no_lrm",
        "--seeds",
        "1,2",
        "--out",
        &root,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("abl/summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "{csv}");
    assert!(dir.path().join("abl/no_lrm/seed2/latest.lrgn").exists());
    let o = lrgan(&["ablate", "-c", &cfg, "--modes", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}
