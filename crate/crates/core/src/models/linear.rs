//! Linear regressors: OLS, ridge (fixed and cross-validated), lasso by
//! cyclic coordinate descent, and Bayesian ridge by evidence maximization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column means and (population) standard deviations; a zero deviation is
/// stored as 1 so constant columns standardize to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(x: &DMatrix<f64>) -> Scaler {
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut std = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.sum() / n;
            let v = col.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            std.push(if v > 0.0 { v.sqrt() } else { 1.0 });
        }
        Scaler { mean, std }
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| {
            (x[(r, c)] - self.mean[c]) / self.std[c]
        })
    }
}

/// `y = intercept + x · coef` in raw feature units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub coef: Vec<f64>,
    pub intercept: f64,
    /// Population std of each training column, for importance scores.
    pub col_std: Vec<f64>,
    /// Chosen penalty, when selected internally.
    pub lambda: Option<f64>,
}

impl LinearFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|r| {
                self.intercept
                    + self
                        .coef
                        .iter()
                        .enumerate()
                        .map(|(c, b)| b * x[(r, c)])
                        .sum::<f64>()
            })
            .collect()
    }

    /// Map standardized coefficients back to raw units.
    fn from_standardized(beta: &[f64], scaler: &Scaler, y_mean: f64, raw_std: &[f64]) -> LinearFit {
        let coef: Vec<f64> = beta.iter().zip(&scaler.std).map(|(b, s)| b / s).collect();
        let intercept = y_mean
            - coef
                .iter()
                .zip(&scaler.mean)
                .map(|(b, m)| b * m)
                .sum::<f64>();
        LinearFit {
            coef,
            intercept,
            col_std: raw_std.to_vec(),
            lambda: None,
        }
    }
}

fn raw_std(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    x.column_iter()
        .map(|col| {
            let m = col.sum() / n;
            (col.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

fn mean(y: &[f64]) -> f64 {
    y.iter().sum::<f64>() / y.len() as f64
}

/// Least squares with intercept via Householder QR.
pub fn ols(x: &DMatrix<f64>, y: &[f64]) -> Result<LinearFit> {
    let (n, p) = x.shape();
    if n < p + 1 {
        return Err(Error::NotEnoughRows {
            needed: p + 1,
            available: n,
        });
    }
    let mut design = DMatrix::from_element(n, p + 1, 1.0);
    design.columns_mut(1, p).copy_from(x);
    let qr = design.qr();
    let r = qr.r();
    let max_diag = (0..=p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..=p).any(|i| r[(i, i)].abs() <= 1e-10 * max_diag.max(1e-300)) {
        return Err(Error::SingularSystem);
    }
    let qty = qr.q().transpose() * DVector::from_column_slice(y);
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::SingularSystem)?;
    Ok(LinearFit {
        coef: beta.iter().skip(1).copied().collect(),
        intercept: beta[0],
        col_std: raw_std(x),
        lambda: None,
    })
}

/// Ridge on standardized columns with an unpenalized intercept:
/// minimizes `||y - ȳ - Zβ||² + λ||β||²`.
pub fn ridge(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<LinearFit> {
    if x.nrows() < 2 {
        return Err(Error::NotEnoughRows {
            needed: 2,
            available: x.nrows(),
        });
    }
    let scaler = Scaler::fit(x);
    let z = scaler.transform(x);
    let y_mean = mean(y);
    let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));
    let mut gram = z.transpose() * &z;
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let rhs = z.transpose() * yc;
    let beta = gram.cholesky().ok_or(Error::SingularSystem)?.solve(&rhs);
    let mut fit = LinearFit::from_standardized(beta.as_slice(), &scaler, y_mean, &raw_std(x));
    fit.lambda = Some(lambda);
    Ok(fit)
}

/// 13 log-spaced penalties from 1e-3 to 1e3.
pub fn ridge_grid() -> Vec<f64> {
    (0..13).map(|i| 10f64.powf(-3.0 + 0.5 * i as f64)).collect()
}

/// Ridge with λ chosen by internal k-fold CV (mean squared error, ties to
/// the smaller λ) on the given rows only.
pub fn ridge_cv(x: &DMatrix<f64>, y: &[f64], folds: usize, seed: u64) -> Result<LinearFit> {
    let n = x.nrows();
    if n < folds.max(2) {
        return Err(Error::NotEnoughRows {
            needed: folds.max(2),
            available: n,
        });
    }
    let grid = ridge_grid();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (i, &r) in order.iter().enumerate() {
        fold_of[r] = i % folds;
    }
    let mut sse = vec![0.0; grid.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&r| fold_of[r] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&r| fold_of[r] == f).collect();
        let xt = x.select_rows(&train);
        let yt: Vec<f64> = train.iter().map(|&r| y[r]).collect();
        let scaler = Scaler::fit(&xt);
        let z = scaler.transform(&xt);
        let y_mean = mean(&yt);
        let yc = DVector::from_iterator(yt.len(), yt.iter().map(|v| v - y_mean));
        let eig = SymmetricEigen::new(z.transpose() * &z);
        let proj = eig.eigenvectors.transpose() * (z.transpose() * yc);
        let ztest = scaler.transform(&x.select_rows(&test));
        for (g, &lam) in grid.iter().enumerate() {
            let scaled = DVector::from_iterator(
                proj.len(),
                proj.iter()
                    .zip(eig.eigenvalues.iter())
                    .map(|(p, e)| p / (e.max(0.0) + lam)),
            );
            let beta = &eig.eigenvectors * scaled;
            let pred = &ztest * beta;
            for (k, &r) in test.iter().enumerate() {
                sse[g] += (y[r] - y_mean - pred[k]).powi(2);
            }
        }
    }
    let mut best = 0;
    for g in 1..grid.len() {
        if sse[g] < sse[best] {
            best = g;
        }
    }
    ridge(x, y, grid[best])
}

pub const LASSO_TOL: f64 = 1e-7;
pub const LASSO_MAX_SWEEPS: usize = 10_000;

/// Lasso by cyclic coordinate descent on standardized columns:
/// minimizes `(1/2n)||y - ȳ - Zβ||² + α||β||₁`.
pub fn lasso(x: &DMatrix<f64>, y: &[f64], alpha: f64) -> Result<LinearFit> {
    let (n, p) = x.shape();
    if n < 2 {
        return Err(Error::NotEnoughRows {
            needed: 2,
            available: n,
        });
    }
    let scaler = Scaler::fit(x);
    let z = scaler.transform(x);
    let y_mean = mean(y);
    let mut resid: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let col_sq: Vec<f64> = z.column_iter().map(|c| c.norm_squared() / n as f64).collect();
    let mut beta = vec![0.0; p];
    for _ in 0..LASSO_MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            if col_sq[j] == 0.0 {
                continue;
            }
            let col = z.column(j);
            let rho = col.iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / n as f64
                + col_sq[j] * beta[j];
            let new = soft_threshold(rho, alpha) / col_sq[j];
            let delta = new - beta[j];
            if delta != 0.0 {
                for (r, a) in resid.iter_mut().zip(col.iter()) {
                    *r -= a * delta;
                }
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < LASSO_TOL {
            break;
        }
    }
    let mut fit = LinearFit::from_standardized(&beta, &scaler, y_mean, &raw_std(x));
    fit.lambda = Some(alpha);
    Ok(fit)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

pub const BAYES_MAX_ITER: usize = 300;
const BAYES_PRIOR: f64 = 1e-6;

/// Bayesian ridge: alternates posterior mean and evidence updates of the
/// noise precision and weight precision under Gamma(1e-6, 1e-6) priors.
pub fn bayesian_ridge(x: &DMatrix<f64>, y: &[f64]) -> Result<LinearFit> {
    let (n, p) = x.shape();
    if n < 2 {
        return Err(Error::NotEnoughRows {
            needed: 2,
            available: n,
        });
    }
    let scaler = Scaler::fit(x);
    let z = scaler.transform(x);
    let y_mean = mean(y);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let eig = SymmetricEigen::new(z.transpose() * &z);
    let evals: Vec<f64> = eig.eigenvalues.iter().map(|e| e.max(0.0)).collect();
    let proj = eig.eigenvectors.transpose() * (z.transpose() * &yc);
    let var_y = yc.norm_squared() / n as f64;
    let mut alpha = 1.0 / (var_y + f64::EPSILON);
    let mut lambda = 1.0;
    let mut beta = DVector::zeros(p);
    for _ in 0..BAYES_MAX_ITER {
        let scaled = DVector::from_iterator(
            p,
            proj.iter()
                .zip(&evals)
                .map(|(q, e)| q / (e + lambda / alpha)),
        );
        let new_beta = &eig.eigenvectors * scaled;
        let sse = (&yc - &z * &new_beta).norm_squared();
        let gamma: f64 = evals.iter().map(|e| alpha * e / (lambda + alpha * e)).sum();
        lambda = (gamma + 2.0 * BAYES_PRIOR) / (new_beta.norm_squared() + 2.0 * BAYES_PRIOR);
        alpha = (n as f64 - gamma + 2.0 * BAYES_PRIOR) / (sse + 2.0 * BAYES_PRIOR);
        let change = (&new_beta - &beta).amax();
        beta = new_beta;
        if change < 1e-3 {
            break;
        }
    }
    let scaled = DVector::from_iterator(
        p,
        proj.iter()
            .zip(&evals)
            .map(|(q, e)| q / (e + lambda / alpha)),
    );
    let beta = &eig.eigenvectors * scaled;
    let mut fit = LinearFit::from_standardized(beta.as_slice(), &scaler, y_mean, &raw_std(x));
    fit.lambda = Some(lambda / alpha);
    Ok(fit)
}
