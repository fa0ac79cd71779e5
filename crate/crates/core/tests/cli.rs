//! Drives the `stealthpatch` binary through a miniature run.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use stealthpatch::config::PipelineConfig;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stealthpatch"))
        .arg("--run-dir")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let mut cfg = PipelineConfig::default();
    cfg.run.epochs = 2;
    cfg.run.patch_size = 8;
    cfg.run.palette_size = 4;
    cfg.detector_train.epochs = 2;
    cfg.detector_scenes = 16;
    cfg.train_scenes = 8;
    cfg.eval_scenes = 6;
    let path = dir.join("tiny.txt");
    fs::write(&path, cfg.to_text()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn missing_artifacts_name_the_producing_command() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["train-detector"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gen-data"), "{err}");

    let out = run(tmp.path(), &["report"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("eval"));
}

#[test]
fn palette_from_explicit_images() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    ok(tmp.path(), &["--config", &cfg, "gen-data"]);
    let out = tmp.path().join("pal.txt");
    ok(
        tmp.path(),
        &["palette", "--colors", "8", "--output", out.to_str().unwrap(), tmp.path().join("env/0000.ppm").to_str().unwrap()],
    );
    let text = fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().filter(|l| !l.trim().is_empty()).count(), 8);
}

#[test]
fn full_run_produces_metrics_and_a_stable_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = tiny_config(dir);
    ok(dir, &["--config", &cfg, "gen-data"]);
    ok(dir, &["train-detector"]);
    ok(dir, &["palette"]);
    ok(dir, &["train-teacher"]);
    let teacher = fs::read(dir.join("teacher.bin")).unwrap();
    ok(dir, &["train-teacher", "--resume"]);
    assert_eq!(fs::read(dir.join("teacher.bin")).unwrap(), teacher);

    let out = run(dir, &["eval"]);
    assert!(!out.status.success(), "eval needs a student patch");

    ok(dir, &["train-student", "--no-distill"]);
    ok(dir, &["train-student"]);
    ok(dir, &["train-student", "--beta", "0.5", "--name", "half"]);
    ok(dir, &["eval"]);
    let metrics = fs::read_to_string(dir.join("metrics.txt")).unwrap();
    for key in ["asr", "ssim", "final_l_adv", "half.ssim", "student_plain.asr"] {
        assert!(metrics.lines().any(|l| l.starts_with(&format!("{key}="))), "{key} missing:\n{metrics}");
    }
    let curves = fs::read_to_string(dir.join("curves.csv")).unwrap();
    assert!(curves.starts_with("run,beta,epoch,mean_obj"));

    let first = ok(dir, &["report"]);
    let second = ok(dir, &["report"]);
    assert_eq!(first, second);
    assert_eq!(fs::read_to_string(dir.join("report.txt")).unwrap(), first);
}

#[test]
fn conflicting_flags_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(!run(tmp.path(), &["train-student", "--distill", "--no-distill"]).status.success());
    assert!(!run(tmp.path(), &["--threads", "0", "gen-data"]).status.success());
}
