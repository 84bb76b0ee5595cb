//! Metrics assembly and run artifacts.
//!
//! Everything here is a pure function of a [`RunOutput`] (plus the fitted
//! model for the manifest), so `report` can regenerate the files from a
//! saved run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{derive_seed, ConstructId, ValidatedConfig};
use crate::ensemble::{rank_candidates, EnsembleModel, RunOutput};
use crate::error::{Error, Result};
use crate::eval::{
    delta_tau, discriminant_matrix, expected_value_baseline, gemm_fit, kendall_tau_opt, reliability_report,
    render_summary, smape, write_delta_tau, write_discriminant, write_metrics, write_reliability, FoldMetric,
    MetricsReport,
};
use crate::impute::write_audit;
use crate::ingest::ParticipantId;
use crate::reduce::write_masks;

pub const RUN_FILE: &str = "run.json";
pub const MODEL_DIR: &str = "models";
pub const MODEL_FILE: &str = "ensemble.json";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Report files written by every run, in manifest order.
pub const REPORT_FILES: [&str; 10] = [
    "metrics.csv",
    "reliability.csv",
    "discriminant.csv",
    "delta_tau.csv",
    "validation.csv",
    "selection.csv",
    "masks.csv",
    "oof_predictions.csv",
    "validation_predictions.csv",
    "summary.txt",
];

/// Held-out validation scores per construct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetric {
    pub construct: ConstructId,
    pub n: usize,
    pub smape: f64,
    pub tau: Option<f64>,
    pub baseline_smape: f64,
}

fn column(rows: &[[Option<f64>; 19]], c: ConstructId) -> Vec<Option<f64>> {
    rows.iter().map(|r| r[c.index()]).collect()
}

fn pairs(pred: &[f64], actual: &[Option<f64>], idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
    idx.iter().filter_map(|&i| actual[i].map(|a| (pred[i], a))).unzip()
}

/// Theory composite τ on fold `f`: GeMM weights fitted on the other folds
/// over the personality and cognitive columns, applied to fold `f`.
fn theory_tau(run: &RunOutput, c: ConstructId, f: usize, cfg: &ValidatedConfig) -> Option<(Vec<usize>, f64)> {
    let theory: Vec<ConstructId> = ConstructId::ALL.iter().copied().filter(|t| t.is_theory_predictor()).collect();
    let complete = |i: usize| {
        let row = &run.train_targets[i];
        row[c.index()].is_some() && theory.iter().all(|t| row[t.index()].is_some())
    };
    let train: Vec<usize> = (0..run.train_ids.len())
        .filter(|&i| run.plan.fold_of[i] != f && complete(i))
        .collect();
    let test: Vec<usize> = run.plan.members(f).into_iter().filter(|&i| complete(i)).collect();
    if train.len() < 3 || test.len() < 2 {
        return None;
    }
    let preds = |rows: &[usize]| -> Vec<Vec<f64>> {
        theory
            .iter()
            .map(|t| rows.iter().map(|&i| run.train_targets[i][t.index()].expect("complete")).collect())
            .collect()
    };
    let y: Vec<f64> = train.iter().map(|&i| run.train_targets[i][c.index()].expect("complete")).collect();
    let seed = derive_seed(cfg.seed, &[8, c.index() as u64, f as u64]);
    let fit = gemm_fit(&preds(&train), &y, cfg.gemm_restarts, cfg.gemm_iters, seed).ok()?;
    let composite = fit.apply(&preds(&test));
    let actual: Vec<f64> = test.iter().map(|&i| run.train_targets[i][c.index()].expect("complete")).collect();
    kendall_tau_opt(&composite, &actual).map(|t| (test, t))
}

pub fn compute_metrics(run: &RunOutput, cfg: &ValidatedConfig) -> Result<MetricsReport> {
    let k = run.plan.k;
    let mut folds = Vec::new();
    let mut reliability = BTreeMap::new();
    let mut deltas = BTreeMap::new();
    for (&c, res) in &run.results {
        let actual = column(&run.train_targets, c);
        let mut taus = Vec::new();
        for f in 0..k {
            let members = run.plan.members(f);
            let (pred, act) = pairs(&res.oof, &actual, &members);
            if act.is_empty() {
                continue;
            }
            let train: Vec<f64> = (0..actual.len())
                .filter(|&i| run.plan.fold_of[i] != f)
                .filter_map(|i| actual[i])
                .collect();
            let Ok(mu) = expected_value_baseline(&train) else { continue };
            let tau = kendall_tau_opt(&pred, &act);
            taus.extend(tau);
            folds.push(FoldMetric {
                construct: c,
                fold: f,
                smape: smape(&pred, &act)?,
                tau,
                baseline_smape: smape(&vec![mu; act.len()], &act)?,
            });
        }
        if let Some(r) = reliability_report(&taus, cfg.bootstrap_samples, derive_seed(cfg.seed, &[7, c.index() as u64])) {
            reliability.insert(c, r);
        }
        if c.is_job_performance() {
            let (mut model, mut theory) = (Vec::new(), Vec::new());
            for f in 0..k {
                let Some((rows, t)) = theory_tau(run, c, f, cfg) else { continue };
                let (pred, act) = pairs(&res.oof, &actual, &rows);
                if let Some(m) = kendall_tau_opt(&pred, &act) {
                    model.push(m);
                    theory.push(t);
                }
            }
            if !model.is_empty() {
                deltas.insert(c, delta_tau(&model, &theory)?);
            }
        }
    }
    let preds: BTreeMap<ConstructId, Vec<Option<f64>>> = run
        .results
        .iter()
        .map(|(&c, r)| (c, r.oof.iter().map(|&v| Some(v)).collect()))
        .collect();
    let truths: BTreeMap<ConstructId, Vec<Option<f64>>> =
        ConstructId::ALL.iter().map(|&c| (c, column(&run.train_targets, c))).collect();
    Ok(MetricsReport {
        folds,
        reliability,
        delta_tau: deltas,
        discriminant: discriminant_matrix(&ConstructId::ALL, &preds, &truths),
    })
}

/// SMAPE and τ of P on the validation rows; the baseline is the training mean.
pub fn validation_metrics(run: &RunOutput) -> Vec<ValidationMetric> {
    let mut out = Vec::new();
    for (&c, res) in &run.results {
        let actual = column(&run.validation_targets, c);
        let idx: Vec<usize> = (0..actual.len()).collect();
        let (pred, act) = pairs(&res.validation, &actual, &idx);
        let train: Vec<f64> = column(&run.train_targets, c).into_iter().flatten().collect();
        let (Ok(mu), false) = (expected_value_baseline(&train), act.is_empty()) else { continue };
        let (Ok(s), Ok(b)) = (smape(&pred, &act), smape(&vec![mu; act.len()], &act)) else { continue };
        out.push(ValidationMetric {
            construct: c,
            n: act.len(),
            smape: s,
            tau: kendall_tau_opt(&pred, &act),
            baseline_smape: b,
        });
    }
    out
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|e| Error::io(&path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

fn write_validation<W: Write>(w: W, rows: &[ValidationMetric]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["construct", "n", "smape", "tau", "baseline_smape"])?;
    for m in rows {
        out.write_record([
            m.construct.name().to_string(),
            m.n.to_string(),
            format!("{:?}", m.smape),
            opt(m.tau),
            format!("{:?}", m.baseline_smape),
        ])?;
    }
    out.flush().map_err(|e| Error::io("validation", e))?;
    Ok(())
}

/// Every candidate's fold scores; `rank` 1 is the refitted choice unless
/// its refit failed.
fn write_selection<W: Write>(w: W, run: &RunOutput) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["construct", "pass", "candidate", "rank", "selected", "fold", "score", "smape", "error"])?;
    for (c, res) in &run.results {
        let ranking = rank_candidates(&res.candidates);
        for (rank, &i) in ranking.iter().enumerate() {
            let cand = &res.candidates[i];
            for f in 0..cand.fold_scores.len() {
                out.write_record([
                    c.name().to_string(),
                    res.pass.to_string(),
                    cand.label.clone(),
                    (rank + 1).to_string(),
                    u8::from(i == res.selected).to_string(),
                    f.to_string(),
                    opt(cand.fold_scores[f]),
                    opt(cand.fold_smape[f]),
                    cand.error.clone().unwrap_or_default(),
                ])?;
            }
        }
    }
    out.flush().map_err(|e| Error::io("selection", e))?;
    Ok(())
}

/// Wide table: participant_id then one column per construct.
pub fn write_predictions<W: Write>(
    w: W,
    ids: &[ParticipantId],
    preds: &BTreeMap<ConstructId, Vec<f64>>,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["participant_id".to_string()];
    header.extend(preds.keys().map(|c| c.name().to_string()));
    out.write_record(&header)?;
    for (i, p) in ids.iter().enumerate() {
        let mut row = vec![p.to_string()];
        row.extend(preds.values().map(|v| format!("{:?}", v[i])));
        out.write_record(&row)?;
    }
    out.flush().map_err(|e| Error::io("predictions", e))?;
    Ok(())
}

pub fn render_manifest(run: &RunOutput, model: &EnsembleModel) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed = {}", run.seed);
    let _ = writeln!(s, "config_hash = {}", run.config_hash);
    let _ = writeln!(s, "format_version = {}", model.format_version);
    let _ = writeln!(s, "train_participants = {}", run.train_ids.len());
    let _ = writeln!(s, "validation_participants = {}", run.validation_ids.len());
    let _ = writeln!(s, "folds = {}", run.plan.k);
    let _ = writeln!(s, "fusion_mode = {:?}", model.config.fusion_mode);
    let sources: Vec<&str> = model.proxy_sources.iter().map(|c| c.name()).collect();
    let _ = writeln!(s, "proxy_sources = [{}]", sources.join(", "));
    let _ = writeln!(s, "\n[selections]");
    for (c, res) in &run.results {
        let cand = &res.candidates[res.selected];
        let _ = writeln!(
            s,
            "{} = pass {} {} score {}",
            c.name(),
            res.pass,
            cand.label,
            cand.score.map_or("-".to_string(), |x| format!("{x:.6}"))
        );
    }
    let _ = writeln!(s, "\n[files]");
    for f in REPORT_FILES {
        let _ = writeln!(s, "{f}");
    }
    let _ = writeln!(s, "{MODEL_DIR}/{MODEL_FILE}");
    s
}

/// Write every report file into `dir`.
pub fn write_reports(dir: &Path, run: &RunOutput, model: &EnsembleModel) -> Result<MetricsReport> {
    let cfg = &model.config;
    let metrics = compute_metrics(run, cfg)?;
    write_metrics(create(dir, "metrics.csv")?, &metrics.folds)?;
    write_reliability(create(dir, "reliability.csv")?, &metrics.reliability)?;
    write_discriminant(create(dir, "discriminant.csv")?, &metrics.discriminant)?;
    write_delta_tau(create(dir, "delta_tau.csv")?, &metrics.delta_tau)?;
    let validation = validation_metrics(run);
    write_validation(create(dir, "validation.csv")?, &validation)?;
    write_selection(create(dir, "selection.csv")?, run)?;
    let masks: Vec<_> = model
        .constructs
        .values()
        .flat_map(|m| m.predictor.masks.iter().cloned())
        .collect();
    write_masks(create(dir, "masks.csv")?, &masks)?;
    let oof: BTreeMap<ConstructId, Vec<f64>> = run.results.iter().map(|(&c, r)| (c, r.oof.clone())).collect();
    write_predictions(create(dir, "oof_predictions.csv")?, &run.train_ids, &oof)?;
    let val: BTreeMap<ConstructId, Vec<f64>> =
        run.results.iter().map(|(&c, r)| (c, r.validation.clone())).collect();
    write_predictions(create(dir, "validation_predictions.csv")?, &run.validation_ids, &val)?;
    let mut summary = render_summary(&metrics);
    if !validation.is_empty() {
        let _ = writeln!(summary, "\nValidation set");
        let _ = writeln!(summary, "{:<24} {:>6} {:>10} {:>10} {:>8}", "construct", "n", "smape", "baseline", "tau");
        for m in &validation {
            let _ = writeln!(
                summary,
                "{:<24} {:>6} {:>10.2} {:>10.2} {:>8}",
                m.construct.name(),
                m.n,
                m.smape,
                m.baseline_smape,
                m.tau.map_or("-".to_string(), |t| format!("{t:.3}"))
            );
        }
    }
    let mut f = create(dir, "summary.txt")?;
    f.write_all(summary.as_bytes()).map_err(|e| Error::io(dir.join("summary.txt"), e))?;
    f.flush().map_err(|e| Error::io(dir.join("summary.txt"), e))?;
    Ok(metrics)
}

/// Persist a run: reports, manifest, audit, run record and model.
pub fn write_run(dir: &Path, run: &RunOutput, model: &EnsembleModel) -> Result<MetricsReport> {
    std::fs::create_dir_all(dir.join(MODEL_DIR)).map_err(|e| Error::io(dir, e))?;
    let metrics = write_reports(dir, run, model)?;
    write_audit(create(dir, "imputation_audit.csv")?, &run.audit)?;
    let mut m = create(dir, MANIFEST_FILE)?;
    m.write_all(render_manifest(run, model).as_bytes())
        .and_then(|_| m.flush())
        .map_err(|e| Error::io(dir.join(MANIFEST_FILE), e))?;
    let mut r = create(dir, RUN_FILE)?;
    serde_json::to_writer(&mut r, run)?;
    r.flush().map_err(|e| Error::io(dir.join(RUN_FILE), e))?;
    model.save(&dir.join(MODEL_DIR).join(MODEL_FILE))?;
    Ok(metrics)
}

pub fn load_run(dir: &Path) -> Result<RunOutput> {
    let path = dir.join(RUN_FILE);
    let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}
