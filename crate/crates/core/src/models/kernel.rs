//! Kernel ridge regression, used for the SVR-style candidates and (one
//! versus rest on ±1 targets) for the least-squares SVM classifiers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::linear::Scaler;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
    Poly { gamma: f64, degree: u32, coef0: f64 },
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => dot(a, b),
            Kernel::Rbf { gamma } => {
                let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
                (-gamma * d).exp()
            }
            Kernel::Poly {
                gamma,
                degree,
                coef0,
            } => (gamma * dot(a, b) + coef0).powi(degree as i32),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rows(z: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..z.nrows())
        .map(|r| z.row(r).iter().copied().collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelFit {
    pub kernel: Kernel,
    pub scaler: Scaler,
    /// Standardized training rows.
    pub support: Vec<Vec<f64>>,
    /// One dual coefficient vector per output.
    pub duals: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
}

impl KernelFit {
    /// Solve `(K + λI) a = y - ȳ` for each target column.
    pub fn fit(x: &DMatrix<f64>, targets: &[Vec<f64>], kernel: Kernel, lambda: f64) -> Result<KernelFit> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::NotEnoughRows {
                needed: 2,
                available: n,
            });
        }
        let scaler = Scaler::fit(x);
        let support = rows(&scaler.transform(x));
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = kernel.eval(&support[i], &support[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(i, i)] += lambda;
        }
        let chol = k.cholesky().ok_or(Error::SingularSystem)?;
        let mut duals = Vec::new();
        let mut offsets = Vec::new();
        for y in targets {
            let m = y.iter().sum::<f64>() / n as f64;
            let rhs = DVector::from_iterator(n, y.iter().map(|v| v - m));
            duals.push(chol.solve(&rhs).iter().copied().collect());
            offsets.push(m);
        }
        Ok(KernelFit {
            kernel,
            scaler,
            support,
            duals,
            offsets,
        })
    }

    /// Scores for each output: rows × outputs.
    pub fn scores(&self, x: &DMatrix<f64>) -> Vec<Vec<f64>> {
        let z = rows(&self.scaler.transform(x));
        z.iter()
            .map(|row| {
                let kv: Vec<f64> = self
                    .support
                    .iter()
                    .map(|s| self.kernel.eval(row, s))
                    .collect();
                self.duals
                    .iter()
                    .zip(&self.offsets)
                    .map(|(a, m)| m + dot(a, &kv))
                    .collect()
            })
            .collect()
    }
}
