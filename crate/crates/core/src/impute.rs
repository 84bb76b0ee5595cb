//! Missing-data handling fitted per fold.
//!
//! Per-feature gaps use a column statistic (mean, median or zero) taken from
//! training rows. Rows missing a whole modality are routed to cross-stream
//! cluster imputation: k-means on a donor stream groups training rows, and
//! the missing block is filled from the nearest group's centroid. Daily
//! series use causal rolling means with a training-cohort fallback.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ImputeSettings, ModalityKind};
use crate::error::{Error, Result};
use crate::ingest::{FeatureMatrix, ParticipantId};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Mean,
    Median,
    Zero,
    RollingMean,
    ClusterCrossStream,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Mean => "mean",
            Strategy::Median => "median",
            Strategy::Zero => "zero",
            Strategy::RollingMean => "rolling_mean",
            Strategy::ClusterCrossStream => "cluster_cross_stream",
        }
    }
}

/// A complete block: participants × named features.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    pub modality: ModalityKind,
    pub columns: Vec<String>,
    pub participants: Vec<ParticipantId>,
    pub data: DMatrix<f64>,
}

impl DenseBlock {
    pub fn column_values(&self, c: usize) -> Vec<Option<f64>> {
        self.data.column(c).iter().map(|&v| Some(v)).collect()
    }

    pub fn select_columns(&self, names: &[&str]) -> Result<DenseBlock> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.columns
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::SchemaMismatch(format!("column `{n}` not in block")))
            })
            .collect::<Result<_>>()?;
        Ok(DenseBlock {
            modality: self.modality,
            columns: idx.iter().map(|&i| self.columns[i].clone()).collect(),
            participants: self.participants.clone(),
            data: self.data.select_columns(&idx),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub participant: ParticipantId,
    pub feature: String,
    pub strategy: Strategy,
    pub value: f64,
}

pub fn write_audit<W: std::io::Write>(w: W, entries: &[AuditEntry]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["participant", "feature", "strategy", "imputed_value"])?;
    for e in entries {
        wtr.write_record([
            e.participant.as_str(),
            &e.feature,
            e.strategy.name(),
            &format!("{:?}", e.value),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<audit>", e))?;
    Ok(())
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn median_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 0 {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    })
}

/// Training statistics for one modality block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockFit {
    pub modality: ModalityKind,
    pub strategy: Strategy,
    /// Columns of the input block, including dropped ones.
    pub columns: Vec<String>,
    /// Per-column fill value; `None` for dropped columns.
    pub fill: Vec<Option<f64>>,
    /// Training mean per column, used when a cluster centroid is undefined.
    pub means: Vec<Option<f64>>,
    pub sds: Vec<f64>,
}

impl BlockFit {
    fn fit(train: &FeatureMatrix, strategy: Strategy) -> BlockFit {
        let n_cols = train.n_cols();
        let observed = |c: usize| train.column(c).flatten();
        let global = mean_of((0..n_cols).flat_map(observed));
        let means: Vec<Option<f64>> = (0..n_cols).map(|c| mean_of(observed(c))).collect();
        let sds: Vec<f64> = (0..n_cols)
            .map(|c| match means[c] {
                Some(m) => {
                    let v: Vec<f64> = observed(c).collect();
                    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
                    if var > 0.0 {
                        var.sqrt()
                    } else {
                        1.0
                    }
                }
                None => 1.0,
            })
            .collect();
        let fill = (0..n_cols)
            .map(|c| {
                let stat = match strategy {
                    Strategy::Zero => Some(0.0),
                    Strategy::Median => median_of(observed(c)),
                    _ => means[c],
                };
                match stat {
                    Some(v) => Some(v),
                    None => {
                        if global.is_none() {
                            log::warn!(
                                "dropping column `{}` of {}: no observed training values",
                                train.columns()[c],
                                train.modality
                            );
                        }
                        global
                    }
                }
            })
            .collect();
        BlockFit {
            modality: train.modality,
            strategy,
            columns: train.columns().to_vec(),
            fill,
            means,
            sds,
        }
    }

    pub fn kept_columns(&self) -> Vec<usize> {
        (0..self.columns.len())
            .filter(|&c| self.fill[c].is_some())
            .collect()
    }
}

/// k-means over a donor stream, with per-cluster centroids for every block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossStreamModel {
    pub donor: ModalityKind,
    pub k: usize,
    /// Cluster → modality → per-column centroid (raw units).
    pub centroids: Vec<BTreeMap<ModalityKind, Vec<Option<f64>>>>,
}

fn zscore(v: f64, fit: &BlockFit, c: usize) -> f64 {
    (v - fit.means[c].unwrap_or(0.0)) / fit.sds[c]
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd's algorithm with farthest-point seeding. The first centre is a
/// seeded random row; ties resolve to the lowest index.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Vec<usize> {
    let n = points.len();
    if n == 0 || k == 0 {
        return vec![0; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    while centers.len() < k.min(n) {
        let (mut best, mut best_d) = (0, -1.0);
        for (i, p) in points.iter().enumerate() {
            let d = centers
                .iter()
                .map(|c| sq_dist(p, c))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        centers.push(points[best].clone());
    }
    let nearest = |p: &[f64], centers: &[Vec<f64>]| {
        let mut best = (0, f64::INFINITY);
        for (j, c) in centers.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        best.0
    };
    let mut assign = vec![0; n];
    let dim = points[0].len();
    for _ in 0..max_iter {
        for (i, p) in points.iter().enumerate() {
            assign[i] = nearest(p, &centers);
        }
        let mut shift: f64 = 0.0;
        for (j, center) in centers.iter_mut().enumerate() {
            let mut sum = vec![0.0; dim];
            let mut cnt = 0usize;
            for (i, p) in points.iter().enumerate() {
                if assign[i] == j {
                    for d in 0..dim {
                        sum[d] += p[d];
                    }
                    cnt += 1;
                }
            }
            if cnt > 0 {
                let new: Vec<f64> = sum.iter().map(|s| s / cnt as f64).collect();
                shift = shift.max(sq_dist(&new, center).sqrt());
                *center = new;
            }
        }
        if shift < tol {
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        assign[i] = nearest(p, &centers);
    }
    assign
}

impl CrossStreamModel {
    /// Cluster training rows on the donor stream. Donor rows are training
    /// rows whose donor block is not entirely missing; their individual gaps
    /// are mean-filled for clustering.
    pub fn fit(
        train: &BTreeMap<ModalityKind, FeatureMatrix>,
        fits: &BTreeMap<ModalityKind, BlockFit>,
        donor: ModalityKind,
        k: usize,
        seed: u64,
    ) -> Result<CrossStreamModel> {
        let donor_m = train
            .get(&donor)
            .ok_or_else(|| Error::config("impute.donor", format!("{donor} block not loaded")))?;
        let donor_fit = &fits[&donor];
        let n = donor_m.n_rows();
        let donor_rows: Vec<usize> = (0..n).filter(|&r| !donor_m.row_all_missing(r)).collect();
        if donor_rows.len() < k {
            return Err(Error::NoDonorRows {
                needed: k,
                available: donor_rows.len(),
            });
        }
        let points: Vec<Vec<f64>> = donor_rows
            .iter()
            .map(|&r| {
                (0..donor_m.n_cols())
                    .map(|c| donor_m.get(r, c).map_or(0.0, |v| zscore(v, donor_fit, c)))
                    .collect()
            })
            .collect();
        let donor_assign = kmeans(&points, k, seed, 100, 1e-6);
        let mut assign: Vec<Option<usize>> = vec![None; n];
        for (i, &r) in donor_rows.iter().enumerate() {
            assign[r] = Some(donor_assign[i]);
        }
        let mut model = CrossStreamModel {
            donor,
            k,
            centroids: Vec::new(),
        };
        model.centroids = model.centroids_from(train, &assign);
        // rows without the donor join the nearest cluster on what they have
        let pending: Vec<usize> = (0..n).filter(|&r| assign[r].is_none()).collect();
        if !pending.is_empty() {
            for r in pending {
                assign[r] = Some(model.nearest(train, fits, r, &[]));
            }
            model.centroids = model.centroids_from(train, &assign);
        }
        Ok(model)
    }

    fn centroids_from(
        &self,
        train: &BTreeMap<ModalityKind, FeatureMatrix>,
        assign: &[Option<usize>],
    ) -> Vec<BTreeMap<ModalityKind, Vec<Option<f64>>>> {
        (0..self.k)
            .map(|j| {
                train
                    .iter()
                    .map(|(&m, block)| {
                        let cent = (0..block.n_cols())
                            .map(|c| {
                                mean_of(
                                    (0..block.n_rows())
                                        .filter(|&r| assign[r] == Some(j))
                                        .filter_map(|r| block.get(r, c)),
                                )
                            })
                            .collect();
                        (m, cent)
                    })
                    .collect()
            })
            .collect()
    }

    /// Nearest cluster by mean squared z-distance over the row's observed
    /// cells, skipping modalities listed in `exclude`.
    fn nearest(
        &self,
        blocks: &BTreeMap<ModalityKind, FeatureMatrix>,
        fits: &BTreeMap<ModalityKind, BlockFit>,
        row: usize,
        exclude: &[ModalityKind],
    ) -> usize {
        let mut best = (0, f64::INFINITY);
        for (j, cent) in self.centroids.iter().enumerate() {
            let (mut s, mut cnt) = (0.0, 0usize);
            for (m, block) in blocks {
                if exclude.contains(m) {
                    continue;
                }
                let (Some(fit), Some(cm)) = (fits.get(m), cent.get(m)) else {
                    continue;
                };
                for c in 0..block.n_cols() {
                    if let (Some(v), Some(cv)) = (block.get(row, c), cm[c]) {
                        s += (zscore(v, fit, c) - zscore(cv, fit, c)).powi(2);
                        cnt += 1;
                    }
                }
            }
            let d = if cnt > 0 { s / cnt as f64 } else { 0.0 };
            if d < best.1 {
                best = (j, d);
            }
        }
        best.0
    }
}

/// Every statistic needed to complete blocks, fitted on training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeModel {
    pub blocks: BTreeMap<ModalityKind, BlockFit>,
    pub cross: Option<CrossStreamModel>,
}

impl ImputeModel {
    pub fn fit(
        train: &BTreeMap<ModalityKind, FeatureMatrix>,
        settings: &ImputeSettings,
        seed: u64,
    ) -> Result<ImputeModel> {
        let blocks: BTreeMap<ModalityKind, BlockFit> = train
            .iter()
            .map(|(&m, block)| (m, BlockFit::fit(block, settings.strategy_for(m))))
            .collect();
        let cross = if settings.full_modality == Strategy::ClusterCrossStream
            && train.contains_key(&settings.donor)
        {
            Some(CrossStreamModel::fit(
                train,
                &blocks,
                settings.donor,
                settings.k_clusters,
                seed,
            )?)
        } else {
            None
        };
        Ok(ImputeModel { blocks, cross })
    }

    /// Complete every block. Blocks must carry the columns seen at fit time
    /// and share one participant order.
    pub fn apply(
        &self,
        blocks: &BTreeMap<ModalityKind, FeatureMatrix>,
        audit: bool,
    ) -> Result<(BTreeMap<ModalityKind, DenseBlock>, Vec<AuditEntry>)> {
        for (m, block) in blocks {
            let fit = self
                .blocks
                .get(m)
                .ok_or_else(|| Error::SchemaMismatch(format!("{m} block was not fitted")))?;
            if fit.columns != block.columns() {
                return Err(Error::SchemaMismatch(format!("{m} columns differ from fit")));
            }
        }
        let participants: Vec<ParticipantId> = blocks
            .values()
            .next()
            .map(|b| b.participants().to_vec())
            .unwrap_or_default();
        let n = participants.len();
        // per row: modalities to fill from a cluster and the chosen cluster
        let routes: Vec<(Vec<ModalityKind>, usize)> = par::map_range(n, |r| {
            let Some(cross) = &self.cross else {
                return (Vec::new(), 0);
            };
            let missing: Vec<ModalityKind> = blocks
                .iter()
                .filter(|(_, b)| b.n_cols() > 0 && b.row_all_missing(r))
                .map(|(&m, _)| m)
                .collect();
            if missing.is_empty() {
                return (missing, 0);
            }
            let j = cross.nearest(blocks, &self.blocks, r, &missing);
            (missing, j)
        });

        let mut out = BTreeMap::new();
        let mut entries = Vec::new();
        for (&m, block) in blocks {
            let fit = &self.blocks[&m];
            let kept = fit.kept_columns();
            let mut data = DMatrix::zeros(n, kept.len());
            for r in 0..n {
                let (missing, cluster) = &routes[r];
                let from_cluster = missing.contains(&m);
                for (k, &c) in kept.iter().enumerate() {
                    let v = match block.get(r, c) {
                        Some(v) => v,
                        None => {
                            let (v, strategy) = if from_cluster {
                                let cent = self.cross.as_ref().expect("routed rows need a model")
                                    .centroids[*cluster]
                                    .get(&m)
                                    .and_then(|cm| cm[c]);
                                (
                                    cent.unwrap_or_else(|| fit.fill[c].expect("kept column")),
                                    Strategy::ClusterCrossStream,
                                )
                            } else {
                                (fit.fill[c].expect("kept column"), fit.strategy)
                            };
                            if audit {
                                entries.push(AuditEntry {
                                    participant: participants[r].clone(),
                                    feature: fit.columns[c].clone(),
                                    strategy,
                                    value: v,
                                });
                            }
                            v
                        }
                    };
                    data[(r, k)] = v;
                }
            }
            out.insert(
                m,
                DenseBlock {
                    modality: m,
                    columns: kept.iter().map(|&c| fit.columns[c].clone()).collect(),
                    participants: participants.clone(),
                    data,
                },
            );
        }
        Ok((out, entries))
    }
}

/// Fit on `train`, complete both `train` and `apply`.
pub fn impute_fold(
    train: &BTreeMap<ModalityKind, FeatureMatrix>,
    apply: &BTreeMap<ModalityKind, FeatureMatrix>,
    settings: &ImputeSettings,
    seed: u64,
) -> Result<(
    ImputeModel,
    BTreeMap<ModalityKind, DenseBlock>,
    BTreeMap<ModalityKind, DenseBlock>,
)> {
    let model = ImputeModel::fit(train, settings, seed)?;
    let (t, _) = model.apply(train, false)?;
    let (a, _) = model.apply(apply, false)?;
    Ok((model, t, a))
}

/// Causal fill: a gap at `t` takes the mean of the values observed strictly
/// before `t`, or `global_mean` when there are none.
pub fn rolling_mean_impute(values: &[Option<f64>], global_mean: f64) -> Vec<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    values
        .iter()
        .map(|v| match v {
            Some(x) => {
                sum += x;
                n += 1;
                *x
            }
            None if n > 0 => sum / n as f64,
            None => global_mean,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ValidatedConfig;
    use super::Strategy;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn ids(n: usize) -> Vec<ParticipantId> {
        (0..n).map(|i| ParticipantId(format!("p{i:03}"))).collect()
    }

    fn matrix(m: ModalityKind, rows: &[&[Option<f64>]]) -> FeatureMatrix {
        let cols = rows.first().map_or(0, |r| r.len());
        FeatureMatrix::new(
            m,
            (0..cols).map(|c| format!("{}{c}", m.name())).collect(),
            ids(rows.len()),
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap()
    }

    fn settings(full: Strategy, k: usize) -> ImputeSettings {
        let mut s = ValidatedConfig::default().imputation;
        s.full_modality = full;
        s.k_clusters = k;
        s
    }

    fn one(m: FeatureMatrix) -> BTreeMap<ModalityKind, FeatureMatrix> {
        BTreeMap::from([(m.modality, m)])
    }

    #[test]
    fn mean_strategy_uses_train_statistic() {
        let train = matrix(ModalityKind::Wearable, &[&[Some(2.0)], &[Some(6.0)]]);
        let test = matrix(ModalityKind::Wearable, &[&[None], &[Some(1.0)]]);
        let (_, _, a) = impute_fold(&one(train), &one(test), &settings(Strategy::Mean, 1), 0).unwrap();
        assert_eq!(a[&ModalityKind::Wearable].data[(0, 0)], 4.0);
    }

    #[test]
    fn zero_strategy() {
        let train = matrix(ModalityKind::PhoneAgent, &[&[Some(2.0), Some(1.0)], &[Some(6.0), None]]);
        let mut s = settings(Strategy::Mean, 1);
        s.per_modality.insert(ModalityKind::PhoneAgent, Strategy::Zero);
        let m = ImputeModel::fit(&one(train.clone()), &s, 0).unwrap();
        let (out, audit) = m.apply(&one(train), true).unwrap();
        assert_eq!(out[&ModalityKind::PhoneAgent].data[(1, 1)], 0.0);
        assert_eq!(audit.len(), 1);
        assert_eq!(audit[0].strategy, Strategy::Zero);
    }

    #[test]
    fn all_missing_column_uses_modality_mean() {
        let train = matrix(ModalityKind::Wearable, &[&[Some(2.0), None], &[Some(4.0), None]]);
        let (_, t, _) = impute_fold(&one(train.clone()), &one(train), &settings(Strategy::Mean, 1), 0).unwrap();
        assert_eq!(t[&ModalityKind::Wearable].data[(0, 1)], 3.0);

        let empty = matrix(ModalityKind::SocialMedia, &[&[None], &[None]]);
        let (_, t, _) = impute_fold(&one(empty.clone()), &one(empty), &settings(Strategy::Mean, 1), 0).unwrap();
        assert_eq!(t[&ModalityKind::SocialMedia].data.ncols(), 0);
    }

    fn cohort(seed: u64, n: usize) -> BTreeMap<ModalityKind, FeatureMatrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Vec::new();
        let mut s = Vec::new();
        for i in 0..n {
            let base: f64 = StandardNormal.sample(&mut rng);
            for _ in 0..3 {
                let e: f64 = StandardNormal.sample(&mut rng);
                w.push(if rng.random_bool(0.1) { None } else { Some(base + 0.3 * e) });
            }
            let drop_social = i % 7 == 3;
            for _ in 0..2 {
                let e: f64 = StandardNormal.sample(&mut rng);
                s.push(if drop_social { None } else { Some(2.0 * base + 0.3 * e) });
            }
        }
        BTreeMap::from([
            (
                ModalityKind::Wearable,
                FeatureMatrix::new(ModalityKind::Wearable, vec!["w0".into(), "w1".into(), "w2".into()], ids(n), w).unwrap(),
            ),
            (
                ModalityKind::SocialMedia,
                FeatureMatrix::new(ModalityKind::SocialMedia, vec!["s0".into(), "s1".into()], ids(n), s).unwrap(),
            ),
        ])
    }

    #[test]
    fn single_cluster_equals_mean() {
        let data = cohort(1, 60);
        let (_, a, _) = impute_fold(&data, &data, &settings(Strategy::ClusterCrossStream, 1), 3).unwrap();
        let (_, b, _) = impute_fold(&data, &data, &settings(Strategy::Mean, 1), 3).unwrap();
        for m in [ModalityKind::Wearable, ModalityKind::SocialMedia] {
            assert!((&a[&m].data - &b[&m].data).abs().max() <= 1e-12);
        }
    }

    #[test]
    fn identical_profile_gets_its_cluster_centroid() {
        let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
        let mut social: Vec<Vec<Option<f64>>> = Vec::new();
        for i in 0..20 {
            let g = if i < 10 { 0.0 } else { 10.0 };
            rows.push(vec![Some(g), Some(g + 1.0)]);
            social.push(vec![Some(g * 3.0 + (i % 2) as f64)]);
        }
        rows.push(vec![Some(10.0), Some(11.0)]);
        social.push(vec![None]);
        let w: Vec<&[Option<f64>]> = rows.iter().map(|r| r.as_slice()).collect();
        let s: Vec<&[Option<f64>]> = social.iter().map(|r| r.as_slice()).collect();
        let data = BTreeMap::from([
            (ModalityKind::Wearable, matrix(ModalityKind::Wearable, &w)),
            (ModalityKind::SocialMedia, matrix(ModalityKind::SocialMedia, &s)),
        ]);
        let (model, t, _) = impute_fold(&data, &data, &settings(Strategy::ClusterCrossStream, 2), 0).unwrap();
        // centroid of the second group: mean of 30, 31, ... alternating
        assert_eq!(t[&ModalityKind::SocialMedia].data[(20, 0)], 30.5);
        assert_eq!(model.cross.unwrap().k, 2);
    }

    #[test]
    fn complete_rows_unchanged() {
        let data = cohort(2, 30);
        let (_, t, _) = impute_fold(&data, &data, &settings(Strategy::ClusterCrossStream, 3), 0).unwrap();
        let w = &data[&ModalityKind::Wearable];
        for r in 0..30 {
            for c in 0..3 {
                if let Some(v) = w.get(r, c) {
                    assert_eq!(t[&ModalityKind::Wearable].data[(r, c)], v);
                }
            }
        }
    }

    #[test]
    fn too_few_donor_rows() {
        let w = matrix(ModalityKind::Wearable, &[&[Some(1.0)], &[None]]);
        let r = ImputeModel::fit(&one(w), &settings(Strategy::ClusterCrossStream, 2), 0);
        assert!(matches!(r, Err(Error::NoDonorRows { needed: 2, available: 1 })));
    }

    #[test]
    fn no_missing_cells_after_apply() {
        let data = cohort(3, 50);
        let (_, t, _) = impute_fold(&data, &data, &settings(Strategy::ClusterCrossStream, 4), 9).unwrap();
        for b in t.values() {
            assert!(b.data.iter().all(|v| v.is_finite()));
            assert_eq!(b.data.nrows(), 50);
        }
    }

    #[test]
    fn test_rows_do_not_move_statistics() {
        let data = cohort(4, 40);
        let train_ids: Vec<_> = ids(40)[..30].to_vec();
        let test_ids: Vec<_> = ids(40)[30..].to_vec();
        let split = |d: &BTreeMap<ModalityKind, FeatureMatrix>, who: &[ParticipantId]| {
            d.iter().map(|(&m, b)| (m, b.select_rows(who))).collect::<BTreeMap<_, _>>()
        };
        let train = split(&data, &train_ids);
        let test = split(&data, &test_ids);
        let s = settings(Strategy::ClusterCrossStream, 3);
        let (m1, _, a1) = impute_fold(&train, &test, &s, 1).unwrap();
        let mut perturbed = test.clone();
        let w = perturbed.get_mut(&ModalityKind::Wearable).unwrap();
        for r in 0..w.n_rows() {
            for c in 0..w.n_cols() {
                if w.get(r, c).is_some() && (r + c) % 2 == 0 {
                    w.set(r, c, Some(1e3));
                }
            }
        }
        let (m2, _, a2) = impute_fold(&train, &perturbed, &s, 1).unwrap();
        assert_eq!(m1, m2);
        // imputed cells of untouched rows keep their values
        let orig = &test[&ModalityKind::SocialMedia];
        for r in 0..orig.n_rows() {
            if orig.row_all_missing(r) {
                continue;
            }
            for c in 0..orig.n_cols() {
                if orig.get(r, c).is_none() {
                    assert_eq!(a1[&ModalityKind::SocialMedia].data[(r, c)], a2[&ModalityKind::SocialMedia].data[(r, c)]);
                }
            }
        }
    }

    #[test]
    fn rolling_mean_examples() {
        assert_eq!(rolling_mean_impute(&[Some(1.0), None, Some(3.0)], 9.0), vec![1.0, 1.0, 3.0]);
        assert_eq!(rolling_mean_impute(&[None, Some(5.0)], 2.0), vec![2.0, 5.0]);
        assert_eq!(rolling_mean_impute(&[Some(4.0), Some(5.0)], 2.0), vec![4.0, 5.0]);
    }

    /// Prefix-mean oracle computed independently of the running sums.
    fn prefix_oracle(values: &[Option<f64>], global: f64) -> Vec<f64> {
        (0..values.len())
            .map(|t| match values[t] {
                Some(v) => v,
                None => {
                    let before: Vec<f64> = values[..t].iter().flatten().copied().collect();
                    if before.is_empty() {
                        global
                    } else {
                        before.iter().sum::<f64>() / before.len() as f64
                    }
                }
            })
            .collect()
    }

    proptest! {
        #[test]
        fn rolling_mean_is_causal(
            values in prop::collection::vec(prop::option::of(-100.0f64..100.0), 1..40),
            cut in 0usize..40,
            edit in -100.0f64..100.0,
        ) {
            let a = rolling_mean_impute(&values, 0.5);
            let o = prefix_oracle(&values, 0.5);
            for (x, y) in a.iter().zip(&o) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
            let cut = cut.min(values.len() - 1);
            let mut changed = values.clone();
            for v in changed.iter_mut().skip(cut + 1) {
                *v = Some(edit);
            }
            let b = rolling_mean_impute(&changed, 0.5);
            prop_assert_eq!(&a[..=cut], &b[..=cut]);
        }
    }
}
