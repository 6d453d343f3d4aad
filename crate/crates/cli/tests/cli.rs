use std::path::Path;
use std::process::{Command, Output};

fn dpa(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpa"))
        .args(["--preset", "smoke", "--out"])
        .arg(out)
        .args(args)
        .output()
        .expect("run dpa")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = dpa(out, args);
    assert!(
        o.status.success(),
        "dpa {args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn trained(dir: &Path) {
    ok(dir, &["gen-data"]);
    ok(dir, &["train-base", "--steps", "3"]);
    ok(dir, &["train-adapters", "--steps", "3"]);
}

#[test]
fn train_generate_and_repeat_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    for f in ["dataset.dptoy", "base.dpckpt", "model.dpckpt", "base_loss.csv", "adapter_loss.csv"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(d.join("adapter_loss.csv")).unwrap();
    assert!(log.starts_with("step,l_iea,l_tca,l_fusion,total\n"));
    assert_eq!(log.lines().count(), 4);

    let masks = d.join("masks");
    let gen = ["--dump-masks", masks.to_str().unwrap(), "generate", "--caption", "striped left small"];
    ok(d, &gen);
    let first = (std::fs::read(d.join("gen_id0_0.png")).unwrap(), std::fs::read(d.join("gen_id0_0_mask.png")).unwrap());
    ok(d, &gen);
    let second = (std::fs::read(d.join("gen_id0_0.png")).unwrap(), std::fs::read(d.join("gen_id0_0_mask.png")).unwrap());
    assert_eq!(first, second);
    assert_eq!(&first.0[..8], b"\x89PNG\r\n\x1a\n");
    assert!(masks.join("gen_id0_0_heatmap.png").exists());
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert!(report[0]["text_match"].is_number());
}

#[test]
fn evaluate_and_ablate_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let out = ok(d, &["evaluate", "--limit", "1", "--k", "1"]);
    assert!(out.contains("12 images"), "{out}");
    let csv = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("identity_id,caption_tokens,face_score,text_match,seed"));
    assert_eq!(csv.lines().count(), 13);

    let out = ok(d, &["evaluate", "--limit", "0"]);
    assert!(out.contains("0 images"), "{out}");
    assert_eq!(std::fs::read_to_string(d.join("metrics.csv")).unwrap().lines().count(), 1);

    ok(d, &["ablate", "--limit", "1", "--k", "1"]);
    let table = std::fs::read_to_string(d.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["row", "IEA", "TCA", "IEA+TCA", "IEA+TCA+FFB"]);
}

#[test]
fn config_files_merge_over_the_preset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("c.json");
    std::fs::write(&cfg, r#"{"fusion.mode": "independent", "cfg.scale": 2.5}"#).unwrap();
    let out = ok(d, &["--config", cfg.to_str().unwrap(), "--seed", "7", "show-config"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["fusion.mode"], "independent");
    assert_eq!(v["cfg.scale"], 2.5);
    assert_eq!(v["seed"], 7);
    assert_eq!(v["model.base_channels"], 8);

    std::fs::write(&cfg, r#"{"fusion.moed": "independent"}"#).unwrap();
    let o = dpa(d, &["--config", cfg.to_str().unwrap(), "show-config"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("fusion.moed"));
}

#[test]
fn training_free_mode_rejects_two_adapters() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let cfg = d.join("free.json");
    std::fs::write(&cfg, r#"{"fusion.training_free": true}"#).unwrap();
    let o = dpa(d, &["--config", cfg.to_str().unwrap(), "generate", "--caption", "red center large"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("exactly one adapter"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = dpa(d, &["train-base"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset"));
    ok(d, &["gen-data"]);
    let o = dpa(d, &["generate", "--caption", "purple center large"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("caption"));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["grad-check", "--params", "20"]);
    assert!(out.contains("max relative error"));
}
