//! Acceptance suite: one pass/fail line per criterion, nonzero exit on any failure.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jointpred::domain::{ConstructId, ModalityKind, ValidatedConfig};
use jointpred::ensemble::{run_joint_model, Cohort, RunOutput};
use jointpred::eval::{kendall_tau, kendall_tau_opt, smape};
use jointpred::hon::{build_hon, DiscreteSeries, Symbol};
use jointpred::impute::{impute_fold, Strategy};
use jointpred::ingest::{FeatureMatrix, ParticipantId, RangeRules};
use jointpred::models::linear::{ols, ridge};
use jointpred::models::tree::{grow, Criterion, Forest, TreeParams};
use jointpred::report::{self, compute_metrics, REPORT_FILES};
use jointpred::synth::{generate, CohortSpec};

const SEEDS: u64 = 20;
const NULL_CONSTRUCTS: [ConstructId; 4] = [
    ConstructId::PositiveAffect,
    ConstructId::NegativeAffect,
    ConstructId::Tobacco,
    ConstructId::Sleep,
];

type Outcome = (bool, String);

fn cohort_from(spec: &CohortSpec, cfg: &ValidatedConfig) -> Cohort {
    let u = generate(spec)
        .expect("synth")
        .universe(&RangeRules::new(cfg.screening_rules.clone()))
        .expect("universe");
    Cohort::build(&u, cfg).expect("cohort")
}

fn config(seed: u64) -> ValidatedConfig {
    ValidatedConfig {
        seed,
        ..ValidatedConfig::default()
    }
}

// 1. HON tables against brute-force window counting.
fn hon_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut failures = 0usize;
    for _ in 0..1000 {
        let len = rng.random_range(2..=200);
        let alphabet = rng.random_range(1..=5u8);
        let order = rng.random_range(1..=3usize);
        let seq: Vec<Symbol> = (0..len).map(|_| rng.random_range(0..alphabet)).collect();
        let ds = DiscreteSeries {
            participant: ParticipantId("p".into()),
            slot_minutes: 30,
            segments: vec![seq.clone()],
        };
        let model = match build_hon(&ds, order) {
            Ok(m) => m,
            Err(_) => {
                if len > order {
                    failures += 1;
                }
                continue;
            }
        };
        // every context of the given order over the alphabet
        let mut contexts: Vec<Vec<Symbol>> = vec![Vec::new()];
        for _ in 0..order {
            contexts = contexts
                .into_iter()
                .flat_map(|c| {
                    (0..alphabet).map(move |s| {
                        let mut c = c.clone();
                        c.push(s);
                        c
                    })
                })
                .collect();
        }
        for ctx in &contexts {
            let mut total = 0u64;
            let mut next_counts = vec![0u64; alphabet as usize];
            for t in order..len {
                if seq[t - order..t] == ctx[..] {
                    total += 1;
                    next_counts[seq[t] as usize] += 1;
                }
            }
            let mut sum = 0.0;
            for (s, &c) in next_counts.iter().enumerate() {
                let got = model.probability(ctx, s as Symbol);
                match (total, got) {
                    (0, None) => {}
                    (0, Some(_)) | (_, None) => failures += 1,
                    (_, Some(p)) => {
                        worst = worst.max((p - c as f64 / total as f64).abs());
                        sum += p;
                        checked += 1;
                    }
                }
            }
            if total > 0 {
                worst = worst.max((sum - 1.0).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = failures == 0 && worst <= 1e-12 && secs < 30.0;
    (ok, format!("{checked} probabilities, max error {worst:.1e}, {failures} mismatches, {secs:.1}s"))
}

fn brute_tau(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut conc, mut disc, mut tx, mut ty) = (0i64, 0i64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 {
                tx += 1;
            }
            if dy == 0.0 {
                ty += 1;
            }
            if dx * dy > 0.0 {
                conc += 1;
            } else if dx * dy < 0.0 {
                disc += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as u64;
    if tx == n0 || ty == n0 {
        return None;
    }
    Some((conc - disc) as f64 / (((n0 - tx) as f64) * ((n0 - ty) as f64)).sqrt())
}

// 2. Merge-count τ-b against O(n²) enumeration.
fn tau_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..=500);
        let levels = rng.random_range(1..=20);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let fast = kendall_tau(&x, &y).ok();
        if fast != brute_tau(&x, &y) {
            mismatches += 1;
        }
    }
    (mismatches == 0, format!("200 tied vectors, {mismatches} mismatches"))
}

fn row_of(c: &Cohort, p: &ParticipantId) -> usize {
    c.participants.iter().position(|q| q == p).expect("participant")
}

fn scramble_row(c: &mut Cohort, r: usize) {
    for t in c.targets[r].iter_mut().flatten() {
        *t = -*t - 1.0;
    }
    for b in c.static_blocks.values_mut() {
        for col in 0..b.n_cols() {
            b.set(r, col, Some(1.0e4 + col as f64));
        }
    }
    if let Some(reg) = c.regularity.as_mut() {
        for col in 0..reg.n_cols() {
            reg.set(r, col, Some(-7.0));
        }
    }
    for d in c.daily.values_mut() {
        d.tables[r] = None;
    }
    for s in c.slots.values_mut() {
        s[r] = None;
    }
}

// 3. Leakage: test-fold and validation edits leave fitted state and
// out-of-fold predictions bit-identical.
fn leakage() -> Outcome {
    let cfg = config(3);
    let spec = CohortSpec {
        n_participants: 120,
        days: 3,
        seed: 3,
        ..CohortSpec::default()
    };
    let base = cohort_from(&spec, &cfg);
    let (a, _) = run_joint_model(&base, &cfg).expect("run");
    let mut problems = Vec::new();

    // one participant of fold 0, every value changed
    let members = a.plan.members(0);
    let victim = &a.plan.participants[members[0]];
    let mut edited = base.clone();
    scramble_row(&mut edited, row_of(&base, victim));
    let (b, _) = run_joint_model(&edited, &cfg).expect("run");
    if a.preprocessors[0] != b.preprocessors[0] {
        problems.push("fold-0 preprocessing".to_string());
    }
    for (c, ra) in &a.results {
        let rb = &b.results[c];
        if ra.fold_masks[0] != rb.fold_masks[0] {
            problems.push(format!("{c} fold-0 masks"));
        }
        let (fa, fb) = (&ra.candidates, &rb.candidates);
        for (x, y) in fa.iter().zip(fb) {
            if let (Some(px), Some(py)) = (&x.fold_predictions[0], &y.fold_predictions[0]) {
                if px[1..] != py[1..] {
                    problems.push(format!("{c} {} fold-0 predictions", x.label));
                }
            }
        }
    }

    // the same participant, target only: its own prediction is unchanged
    let mut tgt = base.clone();
    let r = row_of(&base, victim);
    for t in tgt.targets[r].iter_mut().flatten() {
        *t = -*t - 1.0;
    }
    let (t, _) = run_joint_model(&tgt, &cfg).expect("run");
    for (c, ra) in &a.results {
        for (x, y) in ra.candidates.iter().zip(&t.results[c].candidates) {
            if x.fold_predictions[0] != y.fold_predictions[0] {
                problems.push(format!("{c} {} own prediction", x.label));
            }
        }
    }

    // every validation participant, every value changed
    let mut val = base.clone();
    for p in &a.validation_ids {
        scramble_row(&mut val, row_of(&base, p));
    }
    let (v, _) = run_joint_model(&val, &cfg).expect("run");
    if a.preprocessors != v.preprocessors {
        problems.push("validation edit moved preprocessing".into());
    }
    for (c, ra) in &a.results {
        let rv = &v.results[c];
        if ra.fold_masks != rv.fold_masks || ra.oof != rv.oof || ra.selected != rv.selected {
            problems.push(format!("{c} moved by validation edit"));
        }
    }
    let ok = problems.is_empty();
    let detail = if ok {
        format!(
            "{} constructs, fold and validation edits bit-identical",
            a.results.len()
        )
    } else {
        problems.join("; ")
    };
    (ok, detail)
}

struct SeedRun {
    run: RunOutput,
    cfg: ValidatedConfig,
}

fn null_spec(seed: u64) -> CohortSpec {
    let mut spec = CohortSpec {
        n_participants: 500,
        seed,
        ..CohortSpec::default()
    };
    for c in NULL_CONSTRUCTS {
        spec.snr_overrides.insert(c.name().to_string(), 0.0);
    }
    spec
}

fn pooled_tau(run: &RunOutput, c: ConstructId) -> f64 {
    let res = &run.results[&c];
    let (p, a): (Vec<f64>, Vec<f64>) = res
        .oof
        .iter()
        .zip(&run.train_targets)
        .filter_map(|(&p, t)| t[c.index()].map(|a| (p, a)))
        .unzip();
    kendall_tau_opt(&p, &a).unwrap_or(0.0)
}

// 4. Model beats the expected-value baseline on signal constructs; null
// constructs stay near zero τ.
fn baseline_dominance(runs: &[SeedRun]) -> Outcome {
    let (mut signal_ok, mut null_ok) = (0, 0);
    let mut misses = BTreeMap::<String, usize>::new();
    let mut loud = Vec::new();
    for s in runs {
        let metrics = compute_metrics(&s.run, &s.cfg).expect("metrics");
        let mut all = true;
        for c in ConstructId::ALL.iter().filter(|c| !NULL_CONSTRUCTS.contains(c)) {
            let beat = matches!(metrics.mean_smape(*c), Some((m, b)) if m < b);
            if !beat {
                all = false;
                *misses.entry(c.name().to_string()).or_default() += 1;
            }
        }
        signal_ok += all as usize;
        let mut quiet = true;
        for &c in &NULL_CONSTRUCTS {
            let t = pooled_tau(&s.run, c);
            if t.abs() >= 0.1 {
                quiet = false;
                loud.push(format!("seed {} {c} {t:+.3}", s.run.seed));
            }
        }
        null_ok += quiet as usize;
    }
    let need = (0.95 * runs.len() as f64).ceil() as usize;
    let ok = runs.len() == SEEDS as usize && signal_ok >= need && null_ok >= need;
    (
        ok,
        format!(
            "signal seeds {signal_ok}/{}, null seeds {null_ok}/{}, misses {misses:?}, null |τ| ≥ 0.1: {loud:?}",
            runs.len(),
            runs.len()
        ),
    )
}

// 5. Sensors carry signal beyond the theory columns: Δτ > 0.
fn incremental_validity() -> Outcome {
    let mut good = 0;
    let mut means = Vec::new();
    for seed in 0..SEEDS {
        let spec = CohortSpec {
            n_participants: 300,
            theory_share: 0.5,
            seed: 500 + seed,
            ..CohortSpec::default()
        };
        let cfg = config(500 + seed);
        let cohort = cohort_from(&spec, &cfg);
        let (run, _) = run_joint_model(&cohort, &cfg).expect("run");
        let metrics = compute_metrics(&run, &cfg).expect("metrics");
        let samples: Vec<f64> = metrics.delta_tau.values().flat_map(|d| d.samples.iter().copied()).collect();
        if samples.is_empty() {
            continue;
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let frac = samples.iter().filter(|&&d| d > 0.0).count() as f64 / samples.len() as f64;
        means.push(mean);
        good += (mean > 0.0 && frac > 0.5) as usize;
    }
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let ok = good as f64 >= 0.9 * SEEDS as f64;
    (ok, format!("{good}/{SEEDS} seeds with mean Δτ > 0 and majority positive, lowest mean {lo:.3}"))
}

// 6. Predictions of independent constructs stay uncorrelated.
fn discriminant(run: &SeedRun) -> Outcome {
    let metrics = compute_metrics(&run.run, &run.cfg).expect("metrics");
    let cells: Vec<_> = metrics.discriminant.off_diagonal_predicted().collect();
    let inside = cells.iter().filter(|c| matches!(c, Some(c) if c.r.abs() <= 0.2)).count();
    let worst = cells.iter().flatten().map(|c| c.r.abs()).fold(0.0, f64::max);
    let ok = inside as f64 >= 0.95 * cells.len() as f64;
    (ok, format!("{inside}/{} cells within ±0.2, max |r| {worst:.3}", cells.len()))
}

// 7. SMAPE bounds and the 200-bounded definition.
fn smape_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut out = 0;
    for _ in 0..10_000 {
        let a: f64 = rng.random_range(-1e3..1e3);
        let b: f64 = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(-1e3..1e3) };
        let s = smape(&[a], &[b]).expect("smape");
        if !(0.0..=200.0).contains(&s) {
            out += 1;
        }
    }
    // 2|p - a| / (|p| + |a|) = 1.956 at p = 1, a = 3.956 / 0.044
    let tobacco = smape(&[1.0], &[3.956 / 0.044]).expect("smape");
    let representable = (tobacco - 195.6).abs() < 1e-9 && tobacco > 100.0;
    (
        out == 0 && representable,
        format!("{out} of 10000 outside [0, 200]; baseline 195.6 reproduced as {tobacco:.6}"),
    )
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_jointpred"))
}

fn check(cmd: &mut Command) {
    let out = cmd.output().expect("spawn");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

// 8. Two CLI runs with one seed write byte-identical reports.
fn determinism(dir: &Path) -> Outcome {
    let spec = dir.join("spec.toml");
    std::fs::write(&spec, "n_participants = 120\ndays = 3\nseed = 8\n").expect("spec");
    let data = dir.join("data");
    check(bin().arg("synth").arg("--config").arg(&spec).arg("--out").arg(&data));
    for run in ["run_a", "run_b"] {
        check(
            bin()
                .args(["run", "--seed", "8", "--data"])
                .arg(&data)
                .arg("--out")
                .arg(dir.join(run)),
        );
    }
    let mut files: Vec<&str> = REPORT_FILES.to_vec();
    files.extend([report::MANIFEST_FILE, report::RUN_FILE, "imputation_audit.csv"]);
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| {
            let a = std::fs::read(dir.join("run_a").join(f));
            let b = std::fs::read(dir.join("run_b").join(f));
            !matches!((a, b), (Ok(a), Ok(b)) if a == b)
        })
        .collect();
    (
        differing.is_empty(),
        format!("{} files compared, differing: {differing:?}", files.len()),
    )
}

// 9. Solver oracles.
fn solver_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, p) = (60, 5);
    let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
    let y: Vec<f64> = (0..n)
        .map(|r| 1.5 + (0..p).map(|c| (c as f64 - 2.0) * x[(r, c)]).sum::<f64>() + rng.random_range(-0.5..0.5))
        .collect();
    let mut notes = Vec::new();

    let fit = ols(&x, &y).expect("ols");
    let a = DMatrix::from_fn(n, p + 1, |r, c| if c == 0 { 1.0 } else { x[(r, c - 1)] });
    let yv = nalgebra::DVector::from_column_slice(&y);
    let beta = (a.transpose() * &a)
        .lu()
        .solve(&(a.transpose() * yv))
        .expect("normal equations");
    let mut ours = vec![fit.intercept];
    ours.extend(&fit.coef);
    let rel = |u: &[f64], v: &[f64]| {
        u.iter().zip(v).map(|(a, b)| (a - b).abs() / b.abs().max(1.0)).fold(0.0, f64::max)
    };
    let e_ols = rel(&ours, beta.as_slice());
    if e_ols > 1e-8 {
        notes.push(format!("ols {e_ols:.1e}"));
    }

    let r0 = ridge(&x, &y, 0.0).expect("ridge");
    let mut r0v = vec![r0.intercept];
    r0v.extend(&r0.coef);
    let e_ridge = rel(&r0v, &ours);
    if e_ridge > 1e-8 {
        notes.push(format!("ridge(0) {e_ridge:.1e}"));
    }

    let params = TreeParams {
        min_leaf: 3,
        max_depth: 0,
        max_features: None,
        criterion: Criterion::Variance,
    };
    let forest = Forest::fit(&x, &y, 1, false, &params, 4);
    let cart = grow(&x, &y, (0..n).collect(), &params, 0);
    let same_tree = forest.trees[0].nodes == cart.nodes
        && (0..n).all(|r| forest.predict_row(&x, r) == cart.predict_row(&x, r));
    if !same_tree {
        notes.push("forest(1) differs from cart".into());
    }

    // donor block complete, second block with gaps and one missing row
    let ids: Vec<ParticipantId> = (0..40).map(|i| ParticipantId(format!("p{i:02}"))).collect();
    let wear: Vec<Option<f64>> = (0..40 * 3).map(|_| Some(rng.random_range(0.0..10.0))).collect();
    let social: Vec<Option<f64>> = (0..40 * 2)
        .map(|i| {
            if i / 2 == 5 || rng.random_bool(0.1) {
                None
            } else {
                Some(rng.random_range(-3.0..3.0))
            }
        })
        .collect();
    let blocks = BTreeMap::from([
        (
            ModalityKind::Wearable,
            FeatureMatrix::new(ModalityKind::Wearable, vec!["w0".into(), "w1".into(), "w2".into()], ids.clone(), wear)
                .expect("matrix"),
        ),
        (
            ModalityKind::SocialMedia,
            FeatureMatrix::new(ModalityKind::SocialMedia, vec!["s0".into(), "s1".into()], ids, social)
                .expect("matrix"),
        ),
    ]);
    let settings = |full: Strategy| {
        let mut s = ValidatedConfig::default().imputation;
        s.default = Strategy::Mean;
        s.per_modality.clear();
        s.full_modality = full;
        s.donor = ModalityKind::Wearable;
        s.k_clusters = 1;
        s
    };
    let (_, cl, _) = impute_fold(&blocks, &blocks, &settings(Strategy::ClusterCrossStream), 9).expect("cluster");
    let (_, mn, _) = impute_fold(&blocks, &blocks, &settings(Strategy::Mean), 9).expect("mean");
    let e_imp = cl
        .iter()
        .map(|(m, b)| (&b.data - &mn[m].data).abs().max())
        .fold(0.0, f64::max);
    if e_imp > 1e-12 {
        notes.push(format!("cluster(k=1) {e_imp:.1e}"));
    }
    let ok = notes.is_empty();
    (
        ok,
        if ok {
            format!("ols {e_ols:.1e}, ridge(0) {e_ridge:.1e}, forest(1) == cart, cluster(k=1) {e_imp:.1e}")
        } else {
            notes.join("; ")
        },
    )
}

fn in_range(cfg: &ValidatedConfig, c: ConstructId, v: f64) -> bool {
    let k = cfg.constructs.get(c);
    v.is_finite() && v >= k.lo && v <= k.hi
}

// 10. Every emitted prediction lies in its construct range.
fn range_compliance(runs: &[SeedRun], dir: &Path) -> Outcome {
    let (mut total, mut bad) = (0usize, 0usize);
    for s in runs {
        for (&c, res) in &s.run.results {
            for &v in res.oof.iter().chain(&res.validation) {
                total += 1;
                bad += !in_range(&s.cfg, c, v) as usize;
            }
        }
    }
    // CLI predict on a fresh cohort with the determinism run's model
    let spec = dir.join("fresh.toml");
    std::fs::write(&spec, "n_participants = 60\ndays = 3\nseed = 10\nsnr = 8.0\n").expect("spec");
    let data = dir.join("fresh");
    check(bin().arg("synth").arg("--config").arg(&spec).arg("--out").arg(&data));
    let out = dir.join("pred");
    check(bin().arg("predict").arg("--models").arg(dir.join("run_a")).arg("--data").arg(&data).arg("--out").arg(&out));
    let cfg = ValidatedConfig::default();
    let mut rdr = csv::Reader::from_path(out.join("predictions.csv")).expect("predictions");
    let header: Vec<ConstructId> = rdr
        .headers()
        .expect("header")
        .iter()
        .skip(1)
        .map(|h| h.parse().expect("construct"))
        .collect();
    for rec in rdr.records() {
        let rec = rec.expect("row");
        for (c, v) in header.iter().zip(rec.iter().skip(1)) {
            total += 1;
            bad += !v.parse::<f64>().is_ok_and(|v| in_range(&cfg, *c, v)) as usize;
        }
    }
    (bad == 0, format!("{total} predictions, {bad} outside range"))
}

fn main() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    // ACCEPTANCE_ONLY=4,6 runs a subset
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n:>2}: {} ({})", if o.0 { "PASS" } else { "FAIL" }, o.1);
        results.push((n, o));
    };
    if want(1) {
        report(1, hon_oracle());
    }
    if want(2) {
        report(2, tau_oracle());
    }
    if want(7) {
        report(7, smape_bounds());
    }
    if want(9) {
        report(9, solver_oracles());
    }
    if want(3) {
        report(3, leakage());
    }
    if want(8) {
        report(8, determinism(tmp.path()));
    }
    if want(4) || want(6) || want(10) {
        let runs: Vec<SeedRun> = (0..SEEDS)
            .map(|seed| {
                let cfg = config(seed);
                let cohort = cohort_from(&null_spec(seed), &cfg);
                let (run, _) = run_joint_model(&cohort, &cfg).expect("run");
                SeedRun { run, cfg }
            })
            .collect();
        if want(4) {
            report(4, baseline_dominance(&runs));
        }
        if want(6) {
            report(6, discriminant(&runs[0]));
        }
        if want(10) {
            report(10, range_compliance(&runs, tmp.path()));
        }
    }
    if want(5) {
        report(5, incremental_validity());
    }

    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.0).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria run pass", results.len());
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
