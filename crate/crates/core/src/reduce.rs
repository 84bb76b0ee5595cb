//! PCA and correlation-based top-k selection. Both are fitted on training
//! rows only; callers pass the training fold and apply the result to
//! anything else.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::domain::{ConstructId, ModalityKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub columns: Vec<String>,
    pub mean: DVector<f64>,
    /// components × columns, orthonormal rows.
    pub components: DMatrix<f64>,
    /// Variance of each projected coordinate on the fit data.
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

/// Centered SVD fit. Loadings are signed so each component's
/// largest-magnitude entry is positive.
pub fn pca_fit(x: &DMatrix<f64>, columns: &[String], components: usize) -> Result<PcaModel> {
    let (n, p) = x.shape();
    if columns.len() != p {
        return Err(Error::SchemaMismatch(format!(
            "{} names for {p} columns",
            columns.len()
        )));
    }
    let max = p.min(n.saturating_sub(1));
    if components == 0 || components > max {
        return Err(Error::InvalidComponents {
            requested: components,
            max,
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite cell".into()));
    }
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let total: f64 = centered.iter().map(|v| v * v).sum::<f64>() / (n - 1) as f64;
    if total <= 0.0 {
        return Err(Error::DegenerateInput(
            "every column has zero variance".into(),
        ));
    }
    let mut comps = DMatrix::zeros(components, p);
    let mut explained = Vec::with_capacity(components);
    for (k, (s, mut row)) in top_directions(&centered, components).into_iter().enumerate() {
        let (mut best, mut best_abs) = (0.0, -1.0);
        for &v in row.iter() {
            if v.abs() > best_abs + 1e-12 {
                best_abs = v.abs();
                best = v;
            }
        }
        if best < 0.0 {
            row = -row;
        }
        comps.row_mut(k).copy_from(&row);
        explained.push(s * s / (n - 1) as f64);
    }
    let ratio = explained.iter().map(|e| e / total).collect();
    Ok(PcaModel {
        columns: columns.to_vec(),
        mean,
        components: comps,
        explained_variance: explained,
        explained_variance_ratio: ratio,
    })
}

/// Leading right singular vectors of a centered matrix with their singular
/// values, largest first. Wide matrices go through the n×n Gram matrix;
/// when the requested tail is numerically degenerate, through a full SVD.
fn top_directions(centered: &DMatrix<f64>, k: usize) -> Vec<(f64, RowDVector<f64>)> {
    let (n, p) = centered.shape();
    if p > n {
        let gram = centered * centered.transpose();
        let eig = gram.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let top = eig.eigenvalues[order[0]];
        if top > 0.0 && eig.eigenvalues[order[k - 1]] > 1e-10 * top {
            return order
                .iter()
                .take(k)
                .map(|&i| {
                    let s = eig.eigenvalues[i].sqrt();
                    let v = (centered.transpose() * eig.eigenvectors.column(i)) / s;
                    (s, v.transpose())
                })
                .collect();
        }
    }
    let svd = centered.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
        .iter()
        .take(k)
        .map(|&i| (svd.singular_values[i], v_t.row(i).into_owned()))
        .collect()
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    /// `(x - mean) · componentsᵀ`, without a column-name check.
    pub fn transform_dense(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::SchemaMismatch(format!(
                "{} columns, model expects {}",
                x.ncols(),
                self.mean.len()
            )));
        }
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        Ok(centered * self.components.transpose())
    }

    /// Map scores back to the input space.
    pub fn inverse_transform(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = z * &self.components;
        for mut row in x.row_iter_mut() {
            row += self.mean.transpose();
        }
        x
    }

    /// Keep only the leading `k` components.
    pub fn truncated(&self, k: usize) -> PcaModel {
        PcaModel {
            columns: self.columns.clone(),
            mean: self.mean.clone(),
            components: self.components.rows(0, k).into_owned(),
            explained_variance: self.explained_variance[..k].to_vec(),
            explained_variance_ratio: self.explained_variance_ratio[..k].to_vec(),
        }
    }

    pub fn component_names(&self, prefix: &str) -> Vec<String> {
        (0..self.n_components())
            .map(|i| format!("{prefix}.pc{:03}", i + 1))
            .collect()
    }

    /// Loadings as CSV: `component,<columns...>`.
    pub fn write_loadings<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["component".to_string()];
        header.extend(self.columns.iter().cloned());
        wtr.write_record(&header)?;
        for k in 0..self.n_components() {
            let mut rec = vec![format!("pc{:03}", k + 1)];
            rec.extend(self.components.row(k).iter().map(|v| format!("{v:?}")));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io("<pca loadings>", e))?;
        Ok(())
    }
}

pub fn pca_transform(model: &PcaModel, x: &DMatrix<f64>, columns: &[String]) -> Result<DMatrix<f64>> {
    if columns != model.columns.as_slice() {
        return Err(Error::SchemaMismatch(
            "column names or order differ from the PCA fit".into(),
        ));
    }
    model.transform_dense(x)
}

// ---------------------------------------------------------------------------
// Selection

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorrMethod {
    Pearson,
    #[default]
    Spearman,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub construct: ConstructId,
    pub modality: ModalityKind,
    /// At most k `(feature, correlation)` pairs, by descending |correlation|.
    pub entries: Vec<(String, f64)>,
}

impl SelectionMask {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn correlation(x: &[f64], y: &[f64], method: CorrMethod) -> Option<f64> {
    match method {
        CorrMethod::Pearson => pearson(x, y),
        CorrMethod::Spearman => spearman(x, y),
    }
}

pub const MIN_PAIRS: usize = 3;

/// Rank features by |correlation| with the target over complete pairs.
/// Features with fewer than three pairs, or with undefined correlation, are
/// skipped. Ties in |score| go to the lexicographically smaller name.
pub fn select_top_k(
    names: &[String],
    columns: &[Vec<Option<f64>>],
    targets: &[Option<f64>],
    construct: ConstructId,
    modality: ModalityKind,
    k: usize,
    method: CorrMethod,
) -> Result<SelectionMask> {
    let mut scored: Vec<(String, f64)> = Vec::new();
    for (name, col) in names.iter().zip(columns) {
        let (xs, ys): (Vec<f64>, Vec<f64>) = col
            .iter()
            .zip(targets)
            .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
            .unzip();
        if xs.len() < MIN_PAIRS {
            continue;
        }
        if let Some(r) = correlation(&xs, &ys, method) {
            scored.push((name.clone(), r));
        }
    }
    if scored.is_empty() {
        return Err(Error::NoUsableFeatures(format!("{construct}/{modality}")));
    }
    scored.sort_by(|a, b| {
        b.1.abs()
            .partial_cmp(&a.1.abs())
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(k);
    Ok(SelectionMask {
        construct,
        modality,
        entries: scored,
    })
}

/// Masks as CSV rows `construct,modality,rank,feature,score`.
pub fn write_masks<W: std::io::Write>(w: W, masks: &[SelectionMask]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["construct", "modality", "rank", "feature", "score"])?;
    for m in masks {
        for (i, (name, score)) in m.entries.iter().enumerate() {
            wtr.write_record([
                m.construct.name(),
                m.modality.name(),
                &(i + 1).to_string(),
                name,
                &format!("{score:?}"),
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<masks>", e))?;
    Ok(())
}
