//! End-to-end checks of the `jointpred` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_jointpred"))
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn synth(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let spec = dir.join(format!("spec{seed}.toml"));
    std::fs::write(&spec, format!("n_participants = {n}\ndays = 3\nseed = {seed}\n")).unwrap();
    let data = dir.join(format!("data{seed}"));
    ok(bin().arg("synth").arg("--config").arg(&spec).arg("--out").arg(&data).output().unwrap());
    data
}

/// One small run shared by the tests: (tempdir, data dir, run dir).
fn fixture() -> &'static (TempDir, PathBuf, PathBuf) {
    static RUN: OnceLock<(TempDir, PathBuf, PathBuf)> = OnceLock::new();
    RUN.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let data = synth(tmp.path(), 80, 21);
        let out = tmp.path().join("run");
        ok(bin()
            .args(["run", "--seed", "21", "--workers", "2", "--data"])
            .arg(&data)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap());
        (tmp, data, out)
    })
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap_or("").to_string()
}

fn read_table(path: &Path) -> BTreeMap<String, Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r.iter().skip(1).map(|v| v.parse().unwrap()).collect())
        })
        .collect()
}

#[test]
fn run_writes_every_report_with_its_schema() {
    let (_, _, out) = fixture();
    for (file, head) in [
        ("metrics.csv", "construct,fold,smape,tau,baseline_smape"),
        ("reliability.csv", "construct,min,max,mean,ci_lo,ci_hi"),
        ("delta_tau.csv", "construct,fold,delta_tau,mean,mode_sign,frac_positive"),
        ("validation.csv", "construct,n,smape,tau,baseline_smape"),
        ("selection.csv", "construct,pass,candidate,rank,selected,fold,score,smape,error"),
        ("masks.csv", "construct,modality,rank,feature,score"),
    ] {
        assert_eq!(header(&out.join(file)), head, "{file}");
    }
    assert!(header(&out.join("discriminant.csv")).starts_with("construct,IRB,ITP"));
    for file in ["summary.txt", "manifest.txt", "run.json", "oof_predictions.csv", "imputation_audit.csv"] {
        assert!(out.join(file).is_file(), "{file}");
    }
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed = 21"));
    assert!(manifest.contains("config_hash = "));
    assert!(out.join("models").join("ensemble.json").is_file());
}

#[test]
fn predict_replays_validation_predictions() {
    let (tmp, data, out) = fixture();
    let pred = tmp.path().join("replay");
    ok(bin().arg("predict").arg("--models").arg(out).arg("--data").arg(data).arg("--out").arg(&pred).output().unwrap());
    let recorded = read_table(&out.join("validation_predictions.csv"));
    let replayed = read_table(&pred.join("predictions.csv"));
    assert!(!recorded.is_empty());
    for (id, row) in &recorded {
        for (a, b) in row.iter().zip(&replayed[id]) {
            assert!((a - b).abs() <= 1e-12, "{id}: {a} vs {b}");
        }
    }
}

#[test]
fn report_regenerates_identical_files() {
    let (tmp, _, out) = fixture();
    let again = tmp.path().join("report");
    ok(bin().arg("report").arg("--data").arg(out).arg("--out").arg(&again).output().unwrap());
    for file in ["metrics.csv", "reliability.csv", "discriminant.csv", "summary.txt"] {
        assert_eq!(
            std::fs::read(out.join(file)).unwrap(),
            std::fs::read(again.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn missing_ground_truth_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 30, 4);
    std::fs::remove_file(data.join("ground_truth.csv")).unwrap();
    let out = bin().arg("run").arg("--data").arg(&data).arg("--out").arg(tmp.path().join("o")).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let record: serde_json::Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert!(record["path"].as_str().unwrap().ends_with("ground_truth.csv"), "{err}");
}

#[test]
fn predict_on_empty_directory_fails() {
    let (tmp, _, out) = fixture();
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let res = bin().arg("predict").arg("--models").arg(out).arg("--data").arg(&empty).arg("--out").arg(tmp.path().join("p")).output().unwrap();
    assert!(!res.status.success());
}

#[test]
fn fusion_mode_flag_accepts_both_values() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 40, 5);
    for mode in ["feature", "per_modality_mean"] {
        ok(bin()
            .args(["run", "--skip-proxy-pass", "--fusion-mode", mode, "--data"])
            .arg(&data)
            .arg("--out")
            .arg(tmp.path().join(mode))
            .output()
            .unwrap());
    }
    let bad = bin().args(["run", "--fusion-mode", "stacked", "--data"]).arg(&data).arg("--out").arg(tmp.path().join("x")).output().unwrap();
    assert!(!bad.status.success());
}
