//! Evaluation battery: SMAPE against the expected-value baseline, Kendall
//! τ-b, GeMM-style composite τ, Δτ, bootstrap reliability and the
//! discriminant-validity matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::domain::ConstructId;
use crate::error::{Error, Result};

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Symmetric MAPE with the mean-of-magnitudes denominator, in [0, 200].
pub fn smape(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_lengths(pred, actual)?;
    let total: f64 = pred
        .iter()
        .zip(actual)
        .map(|(p, a)| {
            let d = (p.abs() + a.abs()) / 2.0;
            if d == 0.0 {
                0.0
            } else {
                (p - a).abs() / d
            }
        })
        .sum();
    Ok(100.0 * total / pred.len() as f64)
}

/// Number of tied pairs within runs of equal values in a sorted slice.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for i in 1..=sorted.len() {
        if i < sorted.len() && sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total
}

/// Merge sort returning the number of inversions.
fn sort_counting_swaps(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_counting_swaps(&mut v[..mid], &mut buf[..mid]);
    swaps += sort_counting_swaps(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall τ-b in O(n log n) by merge-count.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x, y)?;
    if let Some(&v) = x.iter().chain(y).find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(v));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::EmptyInput);
    }
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let n1 = tied_pairs(&xs);
    let n3 = tied_pairs(&pairs);
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; n];
    let swaps = sort_counting_swaps(&mut ys, &mut buf);
    let n2 = tied_pairs(&ys);
    if n1 == n0 || n2 == n0 {
        return Err(Error::ZeroVariance);
    }
    let s = n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64 - 2 * swaps as i64;
    Ok(tau_from_counts(s, n0, n1, n2))
}

/// `s / sqrt((n0 - n1)(n0 - n2))`, shared so that other counting schemes
/// produce bit-identical values for identical counts.
pub fn tau_from_counts(s: i64, n0: u64, n1: u64, n2: u64) -> f64 {
    s as f64 / (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt()
}

/// τ with an undefined result mapped to `None`.
pub fn kendall_tau_opt(x: &[f64], y: &[f64]) -> Option<f64> {
    kendall_tau(x, y).ok()
}

fn composite(predictors: &[Vec<f64>], w: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| predictors.iter().zip(w).map(|(p, wj)| wj * p[i]).sum())
        .collect()
}

fn standardized(predictors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    predictors
        .iter()
        .map(|p| {
            let n = p.len() as f64;
            let m = p.iter().sum::<f64>() / n;
            let sd = (p.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            let sd = if sd > 0.0 { sd } else { 1.0 };
            p.iter().map(|v| (v - m) / sd).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GemmFit {
    /// Weights on standardized predictors.
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub tau: f64,
}

impl GemmFit {
    pub fn apply(&self, predictors: &[Vec<f64>]) -> Vec<f64> {
        let n = predictors.first().map_or(0, Vec::len);
        (0..n)
            .map(|i| {
                predictors
                    .iter()
                    .enumerate()
                    .map(|(j, p)| self.weights[j] * (p[i] - self.means[j]) / self.sds[j])
                    .sum()
            })
            .collect()
    }
}

/// Weighted composite of predictors maximizing τ with `actual` by
/// random-restart coordinate search. Starting points include every unit
/// vector, so the result is never below the best single predictor.
pub fn gemm_fit(
    predictors: &[Vec<f64>],
    actual: &[f64],
    restarts: usize,
    iters: usize,
    seed: u64,
) -> Result<GemmFit> {
    let p = predictors.len();
    if p == 0 {
        return Err(Error::EmptyInput);
    }
    let n = actual.len();
    for pr in predictors {
        check_lengths(pr, actual)?;
    }
    let means: Vec<f64> = predictors.iter().map(|v| v.iter().sum::<f64>() / n as f64).collect();
    let sds: Vec<f64> = predictors
        .iter()
        .zip(&means)
        .map(|(v, m)| {
            let sd = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    if p == 1 {
        let tau = kendall_tau(&predictors[0], actual)?;
        return Ok(GemmFit {
            weights: vec![1.0],
            means,
            sds,
            tau,
        });
    }
    let z = standardized(predictors);
    let score = |w: &[f64]| kendall_tau(&composite(&z, w, n), actual).unwrap_or(f64::NEG_INFINITY);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts: Vec<Vec<f64>> = (0..p)
        .map(|j| (0..p).map(|k| if k == j { 1.0 } else { 0.0 }).collect())
        .collect();
    starts.push(vec![1.0; p]);
    for _ in 0..restarts {
        starts.push((0..p).map(|_| rng.random_range(-1.0..1.0)).collect());
    }
    let mut best_w = starts[0].clone();
    let mut best = f64::NEG_INFINITY;
    for start in starts {
        let mut w = start;
        let mut cur = score(&w);
        let mut step = 0.5;
        for _ in 0..iters {
            let j = rng.random_range(0..p);
            let mut improved = false;
            for dir in [1.0, -1.0] {
                let mut cand = w.clone();
                cand[j] += dir * step;
                let s = score(&cand);
                if s > cur {
                    w = cand;
                    cur = s;
                    improved = true;
                    break;
                }
            }
            if !improved {
                step *= 0.8;
                if step < 1e-4 {
                    break;
                }
            }
        }
        if cur > best {
            best = cur;
            best_w = w;
        }
    }
    if !best.is_finite() {
        return Err(Error::ZeroVariance);
    }
    Ok(GemmFit {
        weights: best_w,
        means,
        sds,
        tau: best,
    })
}

/// Best composite τ on the given data.
pub fn gemm_tau(predictors: &[Vec<f64>], actual: &[f64], restarts: usize, iters: usize, seed: u64) -> Result<f64> {
    gemm_fit(predictors, actual, restarts, iters, seed).map(|f| f.tau)
}

/// The training-fold mean.
pub fn expected_value_baseline(train: &[f64]) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(train.iter().sum::<f64>() / train.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTau {
    pub samples: Vec<f64>,
    pub mean: f64,
    /// Sign of the majority of nonzero samples; 0 on a tie.
    pub mode_sign: i8,
    pub frac_positive: f64,
}

pub fn delta_tau(model_taus: &[f64], theory_taus: &[f64]) -> Result<DeltaTau> {
    if model_taus.len() != theory_taus.len() {
        return Err(Error::LengthMismatch(model_taus.len(), theory_taus.len()));
    }
    if model_taus.is_empty() {
        return Err(Error::EmptyInput);
    }
    let samples: Vec<f64> = model_taus.iter().zip(theory_taus).map(|(m, t)| m - t).collect();
    let pos = samples.iter().filter(|d| **d > 0.0).count();
    let neg = samples.iter().filter(|d| **d < 0.0).count();
    Ok(DeltaTau {
        mean: samples.iter().sum::<f64>() / samples.len() as f64,
        mode_sign: (pos as i64 - neg as i64).signum() as i8,
        frac_positive: pos as f64 / samples.len() as f64,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reliability {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Min/max/mean and a percentile-bootstrap 95% CI of the mean fold τ.
pub fn reliability_report(fold_taus: &[f64], samples: usize, seed: u64) -> Option<Reliability> {
    if fold_taus.is_empty() {
        return None;
    }
    let k = fold_taus.len();
    let mean = fold_taus.iter().sum::<f64>() / k as f64;
    let min = fold_taus.iter().copied().fold(f64::INFINITY, f64::min);
    let max = fold_taus.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..samples.max(1))
        .map(|_| (0..k).map(|_| fold_taus[rng.random_range(0..k)]).sum::<f64>() / k as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let idx = (p * (means.len() - 1) as f64).round() as usize;
        means[idx]
    };
    Some(Reliability {
        min,
        max,
        mean,
        ci_lo: q(0.025).min(mean),
        ci_hi: q(0.975).max(mean),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub r: f64,
    pub n: usize,
    pub p: f64,
}

impl Cell {
    pub fn stars(&self) -> &'static str {
        if self.p < 0.001 {
            "***"
        } else if self.p < 0.01 {
            "**"
        } else if self.p < 0.05 {
            "*"
        } else {
            ""
        }
    }
}

/// Upper triangle: correlations among predictions. Lower triangle:
/// correlations among ground truth. Diagonal undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminantMatrix {
    pub constructs: Vec<ConstructId>,
    pub cells: Vec<Vec<Option<Cell>>>,
}

impl DiscriminantMatrix {
    pub fn off_diagonal_predicted(&self) -> impl Iterator<Item = Option<Cell>> + '_ {
        let k = self.constructs.len();
        (0..k).flat_map(move |i| (i + 1..k).map(move |j| self.cells[i][j]))
    }
}

fn pair_cell(a: &[Option<f64>], b: &[Option<f64>]) -> Option<Cell> {
    let (x, y): (Vec<f64>, Vec<f64>) = a
        .iter()
        .zip(b)
        .filter_map(|(u, v)| Some(((*u)?, (*v)?)))
        .unzip();
    let n = x.len();
    if n < 3 {
        return None;
    }
    let r = crate::reduce::pearson(&x, &y)?;
    let p = if n <= 2 || r.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = r * (df / (1.0 - r * r)).sqrt();
        match StudentsT::new(0.0, 1.0, df) {
            Ok(d) => 2.0 * (1.0 - d.cdf(t.abs())),
            Err(_) => 1.0,
        }
    };
    Some(Cell { r, n, p })
}

pub fn discriminant_matrix(
    constructs: &[ConstructId],
    preds: &BTreeMap<ConstructId, Vec<Option<f64>>>,
    truths: &BTreeMap<ConstructId, Vec<Option<f64>>>,
) -> DiscriminantMatrix {
    let k = constructs.len();
    let mut cells = vec![vec![None; k]; k];
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let src = if i < j { preds } else { truths };
            if let (Some(a), Some(b)) = (src.get(&constructs[i]), src.get(&constructs[j])) {
                cells[i][j] = pair_cell(a, b);
            }
        }
    }
    DiscriminantMatrix {
        constructs: constructs.to_vec(),
        cells,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetric {
    pub construct: ConstructId,
    pub fold: usize,
    pub smape: f64,
    pub tau: Option<f64>,
    pub baseline_smape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<FoldMetric>,
    pub reliability: BTreeMap<ConstructId, Reliability>,
    pub delta_tau: BTreeMap<ConstructId, DeltaTau>,
    pub discriminant: DiscriminantMatrix,
}

impl MetricsReport {
    pub fn mean_smape(&self, c: ConstructId) -> Option<(f64, f64)> {
        let rows: Vec<&FoldMetric> = self.folds.iter().filter(|m| m.construct == c).collect();
        if rows.is_empty() {
            return None;
        }
        let k = rows.len() as f64;
        Some((
            rows.iter().map(|m| m.smape).sum::<f64>() / k,
            rows.iter().map(|m| m.baseline_smape).sum::<f64>() / k,
        ))
    }

    pub fn mean_tau(&self, c: ConstructId) -> Option<f64> {
        let taus: Vec<f64> = self
            .folds
            .iter()
            .filter(|m| m.construct == c)
            .filter_map(|m| m.tau)
            .collect();
        if taus.is_empty() {
            None
        } else {
            Some(taus.iter().sum::<f64>() / taus.len() as f64)
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

pub fn write_metrics<W: Write>(w: W, folds: &[FoldMetric]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["construct", "fold", "smape", "tau", "baseline_smape"])?;
    for m in folds {
        out.write_record([
            m.construct.name().to_string(),
            m.fold.to_string(),
            format!("{:?}", m.smape),
            opt(m.tau),
            format!("{:?}", m.baseline_smape),
        ])?;
    }
    out.flush().map_err(|e| Error::io("metrics", e))?;
    Ok(())
}

pub fn write_reliability<W: Write>(w: W, rel: &BTreeMap<ConstructId, Reliability>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["construct", "min", "max", "mean", "ci_lo", "ci_hi"])?;
    for (c, r) in rel {
        out.write_record([
            c.name().to_string(),
            format!("{:?}", r.min),
            format!("{:?}", r.max),
            format!("{:?}", r.mean),
            format!("{:?}", r.ci_lo),
            format!("{:?}", r.ci_hi),
        ])?;
    }
    out.flush().map_err(|e| Error::io("reliability", e))?;
    Ok(())
}

/// One row per construct: tag, then one `r` + stars cell per column.
pub fn write_discriminant<W: Write>(w: W, m: &DiscriminantMatrix) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["construct".to_string()];
    header.extend(m.constructs.iter().map(|c| c.name().to_string()));
    out.write_record(&header)?;
    for (i, c) in m.constructs.iter().enumerate() {
        let mut row = vec![c.name().to_string()];
        for (j, cell) in m.cells[i].iter().enumerate() {
            row.push(if i == j {
                "-".to_string()
            } else {
                let tag = if i < j { "pred" } else { "truth" };
                match cell {
                    Some(x) => format!("{tag}:{:.4}{}", x.r, x.stars()),
                    None => format!("{tag}:"),
                }
            });
        }
        out.write_record(&row)?;
    }
    out.flush().map_err(|e| Error::io("discriminant", e))?;
    Ok(())
}

pub fn write_delta_tau<W: Write>(w: W, d: &BTreeMap<ConstructId, DeltaTau>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["construct", "fold", "delta_tau", "mean", "mode_sign", "frac_positive"])?;
    for (c, dt) in d {
        for (k, s) in dt.samples.iter().enumerate() {
            out.write_record([
                c.name().to_string(),
                k.to_string(),
                format!("{s:?}"),
                format!("{:?}", dt.mean),
                dt.mode_sign.to_string(),
                format!("{:?}", dt.frac_positive),
            ])?;
        }
    }
    out.flush().map_err(|e| Error::io("delta_tau", e))?;
    Ok(())
}

/// Plain-text tables: SMAPE against baseline with fold τ, then Δτ.
pub fn render_summary(r: &MetricsReport) -> String {
    let mut s = String::new();
    let constructs: Vec<ConstructId> = {
        let mut v: Vec<ConstructId> = r.folds.iter().map(|m| m.construct).collect();
        v.dedup();
        v
    };
    let _ = writeln!(s, "Performance (mean over folds)");
    let _ = writeln!(
        s,
        "{:<24} {:>10} {:>10} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "construct", "smape", "baseline", "tau", "min", "max", "ci_lo", "ci_hi"
    );
    for c in &constructs {
        let (sm, bs) = r.mean_smape(*c).unwrap_or((f64::NAN, f64::NAN));
        let tau = r.mean_tau(*c).map_or("-".to_string(), |t| format!("{t:.3}"));
        let rel = r.reliability.get(c);
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        let _ = writeln!(
            s,
            "{:<24} {:>10.2} {:>10.2} {:>8} {:>8} {:>8} {:>8} {:>8}",
            c.name(),
            sm,
            bs,
            tau,
            f(rel.map(|x| x.min)),
            f(rel.map(|x| x.max)),
            f(rel.map(|x| x.ci_lo)),
            f(rel.map(|x| x.ci_hi)),
        );
    }
    if !r.delta_tau.is_empty() {
        let _ = writeln!(s, "\nIncremental validity (model tau minus theory tau)");
        let _ = writeln!(s, "{:<24} {:>10} {:>10} {:>10}", "construct", "mean", "mode", "frac>0");
        for (c, d) in &r.delta_tau {
            let _ = writeln!(
                s,
                "{:<24} {:>10.3} {:>10} {:>10.2}",
                c.name(),
                d.mean,
                d.mode_sign,
                d.frac_positive
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_tau(x: &[f64], y: &[f64]) -> Option<f64> {
        let n = x.len();
        let (mut s, mut tx, mut ty) = (0i64, 0u64, 0u64);
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
                let prod = dx * dy;
                if prod > 0.0 {
                    s += 1;
                } else if prod < 0.0 {
                    s -= 1;
                }
            }
        }
        let n0 = (n * (n - 1) / 2) as u64;
        if tx == n0 || ty == n0 {
            None
        } else {
            Some(tau_from_counts(s, n0, tx, ty))
        }
    }

    #[test]
    fn smape_examples() {
        assert_eq!(smape(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(smape(&[0.0], &[10.0]).unwrap(), 200.0);
        assert_eq!(smape(&[3.0], &[1.0]).unwrap(), 100.0);
        assert_eq!(smape(&[0.0], &[0.0]).unwrap(), 0.0);
        assert!(matches!(smape(&[], &[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn tau_examples() {
        assert_eq!(kendall_tau(&[1., 2., 3.], &[1., 2., 3.]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[1., 2., 3.], &[3., 2., 1.]).unwrap(), -1.0);
        assert!((kendall_tau(&[1., 2., 3.], &[1., 3., 2.]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(kendall_tau(&[1., 1., 1.], &[1., 2., 3.]), Err(Error::ZeroVariance)));
    }

    #[test]
    fn gemm_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x1: Vec<f64> = (0..100).map(|_| rng.random()).collect();
        let x2: Vec<f64> = (0..100).map(|_| rng.random()).collect();
        let y: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + b).collect();
        let single = gemm_tau(std::slice::from_ref(&x1), &y, 20, 200, 0).unwrap();
        assert_eq!(single, kendall_tau(&x1, &y).unwrap());
        let both = gemm_tau(&[x1.clone(), x2.clone()], &y, 20, 200, 0).unwrap();
        let best = kendall_tau(&x1, &y).unwrap().max(kendall_tau(&x2, &y).unwrap());
        assert!(both >= best - 1e-9);
        assert!(both > 0.95);
    }

    #[test]
    fn gemm_null_is_small() {
        let mut hits = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let preds: Vec<Vec<f64>> = (0..3).map(|_| (0..200).map(|_| rng.random()).collect()).collect();
            let y: Vec<f64> = (0..200).map(|_| rng.random()).collect();
            if gemm_tau(&preds, &y, 20, 200, seed).unwrap().abs() < 0.15 {
                hits += 1;
            }
        }
        assert!(hits >= 19, "{hits}/20");
    }

    #[test]
    fn baseline_and_delta() {
        assert_eq!(expected_value_baseline(&[2., 4., 6.]).unwrap(), 4.0);
        assert!(kendall_tau_opt(&[4., 4., 4.], &[1., 2., 3.]).is_none());
        let d = delta_tau(&[0.1, 0.2], &[0.1, 0.2]).unwrap();
        assert!(d.samples.iter().all(|v| *v == 0.0));
        let d = delta_tau(&[0.3, 0.4], &[0.1, 0.2]).unwrap();
        assert_eq!(d.frac_positive, 1.0);
        assert_eq!(d.mode_sign, 1);
        assert!(delta_tau(&[0.1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn baseline_smape_matches_closed_form() {
        let train = [3.0, 5.0, 10.0];
        let test = [1.0, 4.0, 8.0, 0.5];
        let mu = expected_value_baseline(&train).unwrap();
        let got = smape(&vec![mu; test.len()], &test).unwrap();
        let want = 100.0 * test.iter().map(|a| 2.0 * (mu - a).abs() / (mu.abs() + a.abs())).sum::<f64>()
            / test.len() as f64;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn reliability_examples() {
        let r = reliability_report(&[0.3; 5], 500, 0).unwrap();
        assert_eq!((r.ci_lo, r.ci_hi), (0.3, 0.3));
        let r = reliability_report(&[0.1, 0.2, 0.3, 0.4, 0.5], 500, 0).unwrap();
        assert!((r.mean - 0.3).abs() < 1e-12);
        assert_eq!((r.min, r.max), (0.1, 0.5));
        assert!(r.ci_lo < 0.3 && r.ci_hi > 0.3);
    }

    #[test]
    fn discriminant_flags_duplicates_and_skips_diagonal() {
        let ids = [ConstructId::Irb, ConstructId::Itp, ConstructId::Ocb];
        let a: Vec<Option<f64>> = (0..50).map(|i| Some((i as f64).sin())).collect();
        let b: Vec<Option<f64>> = (0..50).map(|i| Some((i as f64 * 1.7).cos())).collect();
        let mut preds = BTreeMap::new();
        preds.insert(ids[0], a.clone());
        preds.insert(ids[1], a.clone());
        preds.insert(ids[2], b.clone());
        let m = discriminant_matrix(&ids, &preds, &preds);
        assert!(m.cells[0][0].is_none());
        let dup = m.cells[0][1].unwrap();
        assert!((dup.r - 1.0).abs() < 1e-12);
        assert_eq!(dup.stars(), "***");
        assert_eq!(m.off_diagonal_predicted().count(), 3);
    }

    #[test]
    fn tau_matches_brute_force_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let n = rng.random_range(2..=120);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
            assert_eq!(kendall_tau_opt(&x, &y), brute_tau(&x, &y));
        }
    }

    proptest! {
        #[test]
        fn smape_is_symmetric_and_bounded(
            pairs in prop::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 1..50)
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let s = smape(&a, &b).unwrap();
            prop_assert!((0.0..=200.0).contains(&s));
            prop_assert_eq!(s, smape(&b, &a).unwrap());
        }

        #[test]
        fn tau_invariant_under_monotone_transform(
            v in prop::collection::vec((0i32..20, 0i32..20), 3..60)
        ) {
            let x: Vec<f64> = v.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = v.iter().map(|p| p.1 as f64).collect();
            let tx: Vec<f64> = x.iter().map(|a| (a / 3.0).exp() + 7.0).collect();
            prop_assert_eq!(kendall_tau_opt(&x, &y), kendall_tau_opt(&tx, &y));
        }
    }
}
