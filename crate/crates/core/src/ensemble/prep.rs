//! Cohort derivation and per-fold preprocessing.
//!
//! A [`Cohort`] holds everything computable without looking at other
//! participants. A [`Preprocessor`] holds everything fitted on a training
//! row set: daily aggregation means, HON bins and embeddings, imputation
//! statistics and the social PCA. Its transform is row-wise, so the same
//! fitted object applies to held-out folds and to new data.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::domain::{ConstructId, ModalityKind, ValidatedConfig};
use crate::error::{Error, Result};
use crate::features::{daily_summary_names, derive_participant, regularity_names, beacon_names, DailyTable};
use crate::hon::{build_hon, project_cohort, slot_means, vectorize_cohort, BinSpec, DiscreteSeries, HonEmbedder, HonModel, SlotMeans};
use crate::domain::ImputeSettings;
use crate::impute::{rolling_mean_impute, AuditEntry, DenseBlock, ImputeModel, Strategy};
use crate::ingest::{FeatureMatrix, ParticipantId, Universe, HEART_SIGNALS};
use crate::par;
use crate::reduce::{pca_fit, PcaModel};

/// Per-participant daily rows for one derived modality.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyBlock {
    pub columns: Vec<String>,
    pub tables: Vec<Option<DailyTable>>,
}

/// Fold-independent view of a universe, one row per participant.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub participants: Vec<ParticipantId>,
    /// Static blocks, rows aligned with `participants`.
    pub static_blocks: BTreeMap<ModalityKind, FeatureMatrix>,
    pub daily: BTreeMap<ModalityKind, DailyBlock>,
    /// Regularity features, appended to the heart-rate-derived block.
    pub regularity: Option<FeatureMatrix>,
    /// Slot means per HON modality.
    pub slots: BTreeMap<ModalityKind, Vec<Option<SlotMeans>>>,
    pub targets: Vec<[Option<f64>; 19]>,
}

fn hon_signal(m: ModalityKind) -> &'static str {
    match m {
        ModalityKind::HonHeart => "heart_rate",
        _ => "stress",
    }
}

fn hon_prefix(m: ModalityKind) -> &'static str {
    match m {
        ModalityKind::HonHeart => "hon_heart",
        _ => "hon_stress",
    }
}

impl Cohort {
    pub fn build(u: &Universe, cfg: &ValidatedConfig) -> Result<Cohort> {
        let participants = u.participants.clone();
        let n = participants.len();
        let static_blocks: BTreeMap<ModalityKind, FeatureMatrix> = u
            .static_blocks
            .iter()
            .map(|(&m, b)| (m, b.select_rows(&participants)))
            .collect();

        let derived = par::map(&participants, |p| {
            u.series.get(p).map(|s| {
                let offset = cfg.utc_offsets.get(p.as_str()).copied().unwrap_or(0);
                derive_participant(p, s, offset, cfg.rssi_cutoff)
            })
        });
        let mut daily = BTreeMap::new();
        let mut regularity = None;
        let any_heart = u
            .series
            .values()
            .any(|s| s.heart_rate.is_some() || s.stress.is_some());
        let any_beacon = u.series.values().any(|s| !s.beacons.is_empty());
        if any_heart {
            daily.insert(
                ModalityKind::HeartRateDerived,
                DailyBlock {
                    columns: daily_summary_names(),
                    tables: derived
                        .iter()
                        .map(|d| d.as_ref().map(|d| d.summaries.clone()).filter(|t| !t.days.is_empty()))
                        .collect(),
                },
            );
            let columns: Vec<String> = HEART_SIGNALS.iter().flat_map(|s| regularity_names(s)).collect();
            let mut cells = Vec::with_capacity(n * columns.len());
            for d in &derived {
                for c in &columns {
                    cells.push(d.as_ref().and_then(|d| d.regularity.get(c).copied().flatten()));
                }
            }
            regularity = Some(FeatureMatrix::new(
                ModalityKind::HeartRateDerived,
                columns,
                participants.clone(),
                cells,
            )?);
        }
        if any_beacon {
            daily.insert(
                ModalityKind::Beacon,
                DailyBlock {
                    columns: beacon_names(),
                    tables: derived
                        .iter()
                        .map(|d| d.as_ref().map(|d| d.beacon.clone()).filter(|t| !t.days.is_empty()))
                        .collect(),
                },
            );
        }

        let mut slots = BTreeMap::new();
        if any_heart {
            for m in [ModalityKind::HonHeart, ModalityKind::HonStress] {
                let sig = hon_signal(m);
                let means = par::map(&participants, |p| {
                    let s = u.series.get(p)?;
                    let ts = if sig == "heart_rate" { s.heart_rate.as_ref() } else { s.stress.as_ref() }?;
                    slot_means(ts, cfg.slot_minutes).ok()
                });
                if means.iter().any(Option::is_some) {
                    slots.insert(m, means);
                }
            }
        }

        let targets = match &u.ground_truth {
            Some(gt) => {
                let cols: Vec<Vec<Option<f64>>> = ConstructId::ALL
                    .iter()
                    .map(|&c| gt.column_for(&participants, c))
                    .collect();
                (0..n)
                    .map(|r| std::array::from_fn(|c| cols[c][r]))
                    .collect()
            }
            None => vec![[None; 19]; n],
        };

        let cohort = Cohort {
            participants,
            static_blocks,
            daily,
            regularity,
            slots,
            targets,
        };
        for m in ModalityKind::ALL {
            if m != ModalityKind::Proxy && !cohort.has_modality(m) {
                log::warn!("modality {m} absent cohort-wide; block skipped");
            }
        }
        Ok(cohort)
    }

    pub fn has_modality(&self, m: ModalityKind) -> bool {
        self.static_blocks.contains_key(&m)
            || self.daily.contains_key(&m)
            || self.slots.contains_key(&m)
    }

    pub fn len(&self) -> usize {
        self.participants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.participants.is_empty()
    }

    /// Target column for `c`, aligned with `participants`.
    pub fn target(&self, c: ConstructId) -> Vec<Option<f64>> {
        self.targets.iter().map(|t| t[c.index()]).collect()
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HonFit {
    pub bins: BinSpec,
    pub orders: Vec<usize>,
    pub embedder: HonEmbedder,
}

/// Every statistic fitted on one training row set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    /// Training mean per daily column, for causal gap filling.
    pub daily_means: BTreeMap<ModalityKind, Vec<Option<f64>>>,
    pub daily_strategy: BTreeMap<ModalityKind, Strategy>,
    pub hon: BTreeMap<ModalityKind, HonFit>,
    /// Raw columns per modality before imputation.
    pub raw_columns: BTreeMap<ModalityKind, Vec<String>>,
    pub impute: ImputeModel,
    pub social_pca: Option<PcaModel>,
}

/// Mean of one participant's days for every column.
fn aggregate(table: &DailyTable, n_cols: usize, global: Option<&[Option<f64>]>) -> Vec<Option<f64>> {
    (0..n_cols)
        .map(|c| {
            let values: Vec<Option<f64>> = table.values.iter().map(|d| d[c]).collect();
            match global.and_then(|g| g[c]) {
                Some(g) if values.iter().any(Option::is_some) => {
                    let filled = rolling_mean_impute(&values, g);
                    Some(filled.iter().sum::<f64>() / filled.len() as f64)
                }
                _ => {
                    let obs: Vec<f64> = values.into_iter().flatten().collect();
                    (!obs.is_empty()).then(|| obs.iter().sum::<f64>() / obs.len() as f64)
                }
            }
        })
        .collect()
}

fn hon_models(p: &ParticipantId, means: &SlotMeans, bins: &BinSpec, orders: &[usize]) -> Option<Vec<HonModel>> {
    let ds = DiscreteSeries::from_means(p.clone(), means, bins);
    let models: Vec<HonModel> = orders.iter().filter_map(|&o| build_hon(&ds, o).ok()).collect();
    (!models.is_empty()).then_some(models)
}

fn select_dense_rows(b: &DenseBlock, rows: &[usize]) -> DMatrix<f64> {
    b.data.select_rows(rows)
}

impl Preprocessor {
    /// Fit on `train` rows of `cohort`.
    pub fn fit(cohort: &Cohort, train: &[usize], cfg: &ValidatedConfig, seed: u64) -> Result<Preprocessor> {
        Preprocessor::fit_transform(cohort, train, cfg, seed, false).map(|(p, _, _)| p)
    }

    /// Fit on `train` rows and complete every cohort row. Same result as
    /// `fit` followed by `transform`.
    #[allow(clippy::type_complexity)]
    pub fn fit_transform(
        cohort: &Cohort,
        train: &[usize],
        cfg: &ValidatedConfig,
        seed: u64,
        audit: bool,
    ) -> Result<(Preprocessor, BTreeMap<ModalityKind, DenseBlock>, Vec<AuditEntry>)> {
        if train.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut daily_means = BTreeMap::new();
        let mut daily_strategy = BTreeMap::new();
        for (&m, block) in &cohort.daily {
            let strategy = cfg.imputation.strategy_for(m);
            daily_strategy.insert(m, strategy);
            if strategy != Strategy::RollingMean {
                continue;
            }
            let means = (0..block.columns.len())
                .map(|c| {
                    let obs: Vec<f64> = train
                        .iter()
                        .filter_map(|&r| block.tables[r].as_ref())
                        .flat_map(|t| t.values.iter().filter_map(move |d| d[c]))
                        .collect();
                    (!obs.is_empty()).then(|| obs.iter().sum::<f64>() / obs.len() as f64)
                })
                .collect();
            daily_means.insert(m, means);
        }

        let mut hon = BTreeMap::new();
        for (&m, slots) in &cohort.slots {
            let pooled: Vec<f64> = train
                .iter()
                .filter_map(|&r| slots[r].as_ref())
                .flat_map(|s| s.segments.iter().flatten().copied())
                .collect();
            if pooled.is_empty() {
                log::warn!("no training series for {m}; block skipped");
                continue;
            }
            let bins = BinSpec::quantiles(&pooled, cfg.hon_bins);
            let models: Vec<(ParticipantId, Vec<HonModel>)> = train
                .iter()
                .filter_map(|&r| {
                    let p = &cohort.participants[r];
                    Some((p.clone(), hon_models(p, slots[r].as_ref()?, &bins, &cfg.hon_orders)?))
                })
                .collect();
            if models.len() < 2 {
                log::warn!("fewer than two training HON rows for {m}; block skipped");
                continue;
            }
            let matrix = vectorize_cohort(&models);
            let embedder = HonEmbedder::fit(&matrix, cfg.hon_pca_components)?;
            hon.insert(
                m,
                HonFit {
                    bins,
                    orders: cfg.hon_orders.clone(),
                    embedder,
                },
            );
        }

        let mut pre = Preprocessor {
            daily_means,
            daily_strategy,
            hon,
            raw_columns: BTreeMap::new(),
            impute: ImputeModel {
                blocks: BTreeMap::new(),
                cross: None,
            },
            social_pca: None,
        };
        let raw = pre.raw_blocks(cohort)?;
        pre.raw_columns = raw.iter().map(|(&m, b)| (m, b.columns().to_vec())).collect();
        let ids: Vec<ParticipantId> = train.iter().map(|&r| cohort.participants[r].clone()).collect();
        let train_raw: BTreeMap<ModalityKind, FeatureMatrix> =
            raw.iter().map(|(&m, b)| (m, b.select_rows(&ids))).collect();
        pre.impute = match ImputeModel::fit(&train_raw, &cfg.imputation, seed) {
            Err(e @ Error::NoDonorRows { .. }) => {
                log::warn!("{e}; whole-modality gaps fall back to mean");
                let settings = ImputeSettings {
                    full_modality: Strategy::Mean,
                    ..cfg.imputation.clone()
                };
                ImputeModel::fit(&train_raw, &settings, seed)?
            }
            other => other?,
        };

        let (dense, entries) = pre.impute.apply(&raw, audit)?;
        if let Some(social) = dense.get(&ModalityKind::SocialMedia) {
            let p = social.columns.len();
            let k = cfg.social_pca_components.min(p).min(train.len().saturating_sub(1));
            if k < cfg.social_pca_components {
                log::warn!(
                    "{}",
                    Error::InvalidComponents {
                        requested: cfg.social_pca_components,
                        max: k
                    }
                );
            }
            if k > 0 {
                let x = select_dense_rows(social, train);
                pre.social_pca = Some(pca_fit(&x, &social.columns, k)?);
            }
        }
        let dense = pre.finish(dense)?;
        Ok((pre, dense, entries))
    }

    /// Uncompleted blocks for every cohort row.
    fn raw_blocks(&self, cohort: &Cohort) -> Result<BTreeMap<ModalityKind, FeatureMatrix>> {
        let ids = &cohort.participants;
        let mut out = cohort.static_blocks.clone();
        for (&m, block) in &cohort.daily {
            let global = self.daily_means.get(&m).map(Vec::as_slice);
            let k = block.columns.len();
            let rows = par::map(&block.tables, |t| match t {
                Some(t) => aggregate(t, k, global),
                None => vec![None; k],
            });
            let mut fm = FeatureMatrix::new(m, block.columns.clone(), ids.clone(), rows.concat())?;
            if m == ModalityKind::HeartRateDerived {
                if let Some(reg) = &cohort.regularity {
                    fm = fm.hstack(reg)?;
                }
            }
            out.insert(
                m,
                match out.get(&m) {
                    Some(existing) => existing.hstack(&fm)?,
                    None => fm,
                },
            );
        }
        for (&m, fit) in &self.hon {
            let k = fit.embedder.components;
            let columns: Vec<String> = (0..k).map(|i| format!("{}.pc{:03}", hon_prefix(m), i + 1)).collect();
            let slots = cohort.slots.get(&m);
            let rows: Vec<Vec<Option<f64>>> = par::map_range(ids.len(), |r| {
                let means = slots.and_then(|s| s[r].as_ref());
                let models = means.and_then(|s| hon_models(&ids[r], s, &fit.bins, &fit.orders));
                match models {
                    Some(models) => {
                        let mat = project_cohort(&[(ids[r].clone(), models)], &fit.embedder.columns);
                        match fit.embedder.transform(&mat) {
                            Ok(e) => e.data.row(0).iter().map(|&v| Some(v)).collect(),
                            Err(_) => vec![None; k],
                        }
                    }
                    None => vec![None; k],
                }
            });
            out.insert(m, FeatureMatrix::new(m, columns, ids.clone(), rows.concat())?);
        }
        Ok(out)
    }

    /// Raw blocks conformed to the fitted column sets. Modalities absent
    /// from `cohort` become all-missing blocks.
    fn conformed(&self, cohort: &Cohort) -> Result<BTreeMap<ModalityKind, FeatureMatrix>> {
        let mut raw = self.raw_blocks(cohort)?;
        let ids = &cohort.participants;
        let mut out = BTreeMap::new();
        for (&m, cols) in &self.raw_columns {
            let block = match raw.remove(&m) {
                Some(b) if b.columns() == cols.as_slice() => b,
                Some(b) => {
                    let idx: Vec<usize> = cols
                        .iter()
                        .map(|c| {
                            b.columns().iter().position(|x| x == c).ok_or_else(|| {
                                Error::SchemaMismatch(format!("{m} column `{c}` missing"))
                            })
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < b.n_cols() {
                        log::warn!("{m}: {} unseen columns ignored", b.n_cols() - idx.len());
                    }
                    b.select_columns(&idx)
                }
                None => FeatureMatrix::new(m, cols.clone(), ids.clone(), vec![None; cols.len() * ids.len()])?,
            };
            out.insert(m, block);
        }
        Ok(out)
    }

    /// Complete blocks for every cohort row, in modality order. Blocks
    /// without columns are omitted.
    pub fn transform(
        &self,
        cohort: &Cohort,
        audit: bool,
    ) -> Result<(BTreeMap<ModalityKind, DenseBlock>, Vec<AuditEntry>)> {
        let raw = self.conformed(cohort)?;
        let (dense, entries) = self.impute.apply(&raw, audit)?;
        Ok((self.finish(dense)?, entries))
    }

    /// Project the social block and drop empty blocks.
    fn finish(&self, mut dense: BTreeMap<ModalityKind, DenseBlock>) -> Result<BTreeMap<ModalityKind, DenseBlock>> {
        if let Some(social) = dense.remove(&ModalityKind::SocialMedia) {
            if let Some(pca) = &self.social_pca {
                let data = pca.transform_dense(&social.data)?;
                dense.insert(
                    ModalityKind::SocialMedia,
                    DenseBlock {
                        modality: ModalityKind::SocialMedia,
                        columns: pca.component_names("social"),
                        participants: social.participants,
                        data,
                    },
                );
            }
        }
        dense.retain(|_, b| !b.columns.is_empty());
        Ok(dense)
    }
}
