//! Joint model: per construct, evaluate every candidate over a static fold
//! plan, keep the best by mean fold score, refit on all training folds and
//! predict the validation set. An optional second pass feeds out-of-fold
//! predictions of the proxy constructs back in as features.
//!
//! Fold contexts: context `f < K` trains on every training fold but `f`;
//! context `K` trains on all of them. Each context has its own fitted
//! [`Preprocessor`], so no statistic ever sees held-out rows.

pub mod prep;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::domain::{derive_seed, ConstructId, ConstructRegistry, FusionMode, ModalityKind, TaskKind, ValidatedConfig};
use crate::error::{Error, Result};
use crate::eval::{kendall_tau_opt, smape};
use crate::impute::{AuditEntry, DenseBlock};
use crate::ingest::ParticipantId;
use crate::models::{self, CandidateSpec, TrainedComponent};
use crate::par;
use crate::reduce::{select_top_k, SelectionMask};

pub use prep::{Cohort, Preprocessor};

pub const FORMAT_VERSION: u32 = 1;

/// Constructs whose out-of-fold predictions feed the second pass.
pub const PROXY_SOURCES: [ConstructId; 2] = [ConstructId::Alcohol, ConstructId::Ocb];

/// Significance a proxy column needs to enter a mask.
pub const PROXY_ALPHA: f64 = 0.05;

pub fn proxy_column(c: ConstructId) -> String {
    format!("proxy.{}", c.name())
}

// ---------------------------------------------------------------------------
// Fold plan

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub participants: Vec<ParticipantId>,
    pub fold_of: Vec<usize>,
    /// The plan is shared by every construct and both passes.
    pub fixed: bool,
}

impl FoldPlan {
    /// Positions in `participants` assigned to fold `f`.
    pub fn members(&self, f: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == f).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.k).map(|f| self.members(f).len()).collect()
    }
}

/// Seeded shuffle, then round-robin assignment.
pub fn make_fold_plan(participants: &[ParticipantId], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::config("folds", "need at least 2 folds"));
    }
    if participants.len() < k {
        return Err(Error::TooFewParticipants {
            available: participants.len(),
            folds: k,
        });
    }
    let mut order: Vec<usize> = (0..participants.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; participants.len()];
    for (i, &p) in order.iter().enumerate() {
        fold_of[p] = i % k;
    }
    Ok(FoldPlan {
        k,
        participants: participants.to_vec(),
        fold_of,
        fixed: true,
    })
}

/// Seeded uniform split into sorted (training, validation) row indices.
pub fn split_holdout(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_val = ((n as f64) * fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = order[..n_val.min(n)].to_vec();
    let mut train = order[n_val.min(n)..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

// ---------------------------------------------------------------------------
// Fusion

/// Completed blocks for one context plus an optional proxy block.
#[derive(Clone, Copy)]
pub struct BlockView<'a> {
    pub base: &'a BTreeMap<ModalityKind, DenseBlock>,
    pub proxy: Option<&'a DenseBlock>,
}

impl<'a> BlockView<'a> {
    pub fn new(base: &'a BTreeMap<ModalityKind, DenseBlock>) -> Self {
        BlockView { base, proxy: None }
    }

    pub fn get(&self, m: ModalityKind) -> Option<&'a DenseBlock> {
        match m {
            ModalityKind::Proxy => self.proxy,
            _ => self.base.get(&m),
        }
    }

    /// Blocks in fusion order.
    pub fn blocks(&self) -> Vec<&'a DenseBlock> {
        ModalityKind::ALL.iter().filter_map(|&m| self.get(m)).collect()
    }
}

/// Concatenate the masked columns of every block whose modality is in
/// `modalities`, in modality order then mask order, for `rows`.
pub fn fuse(
    view: BlockView<'_>,
    masks: &[SelectionMask],
    modalities: &[ModalityKind],
    rows: &[usize],
) -> Result<(DMatrix<f64>, Vec<String>)> {
    let mut picks: Vec<(&DenseBlock, usize)> = Vec::new();
    let mut names = Vec::new();
    for m in ModalityKind::ALL {
        if !modalities.contains(&m) {
            continue;
        }
        for mask in masks.iter().filter(|k| k.modality == m) {
            let block = view
                .get(m)
                .ok_or_else(|| Error::SchemaMismatch(format!("{m} block missing")))?;
            for name in mask.names() {
                let c = block
                    .columns
                    .iter()
                    .position(|x| x == name)
                    .ok_or_else(|| Error::SchemaMismatch(format!("{m} column `{name}` missing")))?;
                picks.push((block, c));
                names.push(format!("{m}:{name}"));
            }
        }
    }
    if picks.is_empty() {
        return Err(Error::EmptyFusion);
    }
    let x = DMatrix::from_fn(rows.len(), picks.len(), |i, j| {
        let (b, c) = picks[j];
        b.data[(rows[i], c)]
    });
    Ok((x, names))
}

fn corr_p(r: f64, n: usize) -> f64 {
    if n <= 2 {
        return 1.0;
    }
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    match StudentsT::new(0.0, 1.0, df) {
        Ok(d) => 2.0 * (1.0 - d.cdf(t.abs())),
        Err(_) => 1.0,
    }
}

/// Top-k masks per block over `rows`. Proxy columns also need a
/// significant correlation. Blocks with nothing usable are left out.
pub fn select_masks(
    view: BlockView<'_>,
    rows: &[usize],
    y: &[f64],
    construct: ConstructId,
    cfg: &ValidatedConfig,
) -> Vec<SelectionMask> {
    let targets: Vec<Option<f64>> = y.iter().map(|&v| Some(v)).collect();
    let mut out = Vec::new();
    for block in view.blocks() {
        let columns: Vec<Vec<Option<f64>>> = (0..block.columns.len())
            .map(|c| rows.iter().map(|&r| Some(block.data[(r, c)])).collect())
            .collect();
        match select_top_k(
            &block.columns,
            &columns,
            &targets,
            construct,
            block.modality,
            cfg.top_k_per_modality,
            cfg.selection_method,
        ) {
            Ok(mut mask) => {
                if block.modality == ModalityKind::Proxy {
                    mask.entries.retain(|(_, r)| corr_p(*r, rows.len()) < PROXY_ALPHA);
                }
                if !mask.is_empty() {
                    out.push(mask);
                }
            }
            Err(e) => log::debug!("{e}"),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Fitted predictors

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub modalities: Vec<ModalityKind>,
    pub component: TrainedComponent,
}

/// One construct's trained model: masks plus one component over the fused
/// matrix, or one per modality in `per_modality_mean` mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPredictor {
    pub construct: ConstructId,
    pub kind: TaskKind,
    pub mode: FusionMode,
    pub masks: Vec<SelectionMask>,
    pub parts: Vec<Part>,
}

fn mask_groups(masks: &[SelectionMask], mode: FusionMode) -> Vec<Vec<ModalityKind>> {
    let mut mods: Vec<ModalityKind> = masks.iter().map(|m| m.modality).collect();
    mods.sort();
    mods.dedup();
    match mode {
        FusionMode::Feature => vec![mods],
        FusionMode::PerModalityMean => mods.into_iter().map(|m| vec![m]).collect(),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn fit_predictor(
    spec: &CandidateSpec,
    construct: ConstructId,
    kind: TaskKind,
    mode: FusionMode,
    view: BlockView<'_>,
    masks: Vec<SelectionMask>,
    rows: &[usize],
    y: &[f64],
    seed: u64,
) -> Result<FittedPredictor> {
    if masks.iter().all(SelectionMask::is_empty) {
        return Err(Error::EmptyFusion);
    }
    let mut parts = Vec::new();
    for (g, modalities) in mask_groups(&masks, mode).into_iter().enumerate() {
        let (x, names) = fuse(view, &masks, &modalities, rows)?;
        let component = models::fit(spec, &x, &names, y, derive_seed(seed, &[g as u64]))?;
        parts.push(Part {
            modalities,
            component,
        });
    }
    Ok(FittedPredictor {
        construct,
        kind,
        mode,
        masks,
        parts,
    })
}

fn vote(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (mut best, mut best_n) = (sorted[0], 0);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        if j - i > best_n {
            best = sorted[i];
            best_n = j - i;
        }
        i = j;
    }
    best
}

impl FittedPredictor {
    /// Unclamped predictions for `rows` of the view.
    pub fn predict(&self, view: BlockView<'_>, rows: &[usize]) -> Result<Vec<f64>> {
        let mut outs = Vec::with_capacity(self.parts.len());
        for part in &self.parts {
            let (x, names) = fuse(view, &self.masks, &part.modalities, rows)?;
            outs.push(models::predict(&part.component, &x, &names)?);
        }
        if outs.len() == 1 {
            return Ok(outs.pop().expect("one part"));
        }
        Ok((0..rows.len())
            .map(|i| {
                let vals: Vec<f64> = outs.iter().map(|o| o[i]).collect();
                match self.kind {
                    TaskKind::Regression => vals.iter().sum::<f64>() / vals.len() as f64,
                    TaskKind::Classification => vote(&vals),
                }
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Run records

/// One candidate's fold-wise record. Predictions are clamped and aligned
/// with [`FoldPlan::members`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub spec: CandidateSpec,
    pub label: String,
    pub fold_predictions: Vec<Option<Vec<f64>>>,
    pub fold_scores: Vec<Option<f64>>,
    pub fold_smape: Vec<Option<f64>>,
    /// Mean fold score; `None` when any fold failed (scores as −∞).
    pub score: Option<f64>,
    pub smape: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassSummary {
    pub selected: String,
    pub score: Option<f64>,
    pub oof: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructResult {
    pub construct: ConstructId,
    pub kind: TaskKind,
    pub pass: u8,
    pub candidates: Vec<CandidateRecord>,
    /// Index into `candidates` of the refitted model.
    pub selected: usize,
    pub fold_masks: Vec<Vec<SelectionMask>>,
    /// Out-of-fold predictions F, aligned with the plan's participants.
    pub oof: Vec<f64>,
    /// Validation predictions P, aligned with the validation participants.
    pub validation: Vec<f64>,
    /// First-pass outcome for constructs rerun with proxy columns.
    pub first_pass: Option<PassSummary>,
}

impl ConstructResult {
    pub fn selected_spec(&self) -> &CandidateSpec {
        &self.candidates[self.selected].spec
    }
}

/// Fold score: τ for regression (undefined counts as 0), accuracy for
/// classification. Second value is SMAPE.
pub fn fold_score(kind: TaskKind, pred: &[f64], actual: &[f64]) -> (Option<f64>, Option<f64>) {
    if actual.is_empty() {
        return (None, None);
    }
    let s = smape(pred, actual).ok();
    let score = match kind {
        TaskKind::Regression => kendall_tau_opt(pred, actual).unwrap_or(0.0),
        TaskKind::Classification => {
            pred.iter().zip(actual).filter(|(p, a)| p == a).count() as f64 / actual.len() as f64
        }
    };
    (Some(score), s)
}

fn mean_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Candidate order: score descending (failures last), then SMAPE, then label.
pub fn rank_candidates(c: &[CandidateRecord]) -> Vec<usize> {
    let keys: Vec<(Option<f64>, Option<f64>, &str)> =
        c.iter().map(|r| (r.score, r.smape, r.label.as_str())).collect();
    rank_keys(&keys)
}

fn rank_keys(keys: &[(Option<f64>, Option<f64>, &str)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| {
        let (sa, ma, la) = keys[a];
        let (sb, mb, lb) = keys[b];
        sb.unwrap_or(f64::NEG_INFINITY)
            .total_cmp(&sa.unwrap_or(f64::NEG_INFINITY))
            .then_with(|| ma.unwrap_or(f64::INFINITY).total_cmp(&mb.unwrap_or(f64::INFINITY)))
            .then_with(|| la.cmp(lb))
    });
    idx
}

// ---------------------------------------------------------------------------
// Serialized model

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructModel {
    pub pass: u8,
    pub spec: CandidateSpec,
    pub predictor: FittedPredictor,
}

/// Everything needed to predict on new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub config: ValidatedConfig,
    pub preprocessor: Preprocessor,
    pub proxy_sources: Vec<ConstructId>,
    pub constructs: BTreeMap<ConstructId, ConstructModel>,
}

fn clamp_all(registry: &ConstructRegistry, c: ConstructId, v: Vec<f64>) -> Result<Vec<f64>> {
    let r = registry.get(c);
    v.into_iter().map(|x| r.clamp(x)).collect()
}

fn proxy_block(participants: &[ParticipantId], sources: &[(ConstructId, Vec<f64>)]) -> DenseBlock {
    let n = participants.len();
    DenseBlock {
        modality: ModalityKind::Proxy,
        columns: sources.iter().map(|(c, _)| proxy_column(*c)).collect(),
        participants: participants.to_vec(),
        data: DMatrix::from_fn(n, sources.len(), |r, j| sources[j].1[r]),
    }
}

impl EnsembleModel {
    /// Clamped predictions per construct, aligned with `cohort.participants`.
    pub fn predict(&self, cohort: &Cohort) -> Result<BTreeMap<ConstructId, Vec<f64>>> {
        if cohort.is_empty() {
            return Err(Error::EmptyInput);
        }
        let (blocks, _) = self.preprocessor.transform(cohort, false)?;
        let rows: Vec<usize> = (0..cohort.len()).collect();
        let reg = &self.config.constructs;
        let mut out = BTreeMap::new();
        for (&c, m) in self.constructs.iter().filter(|(_, m)| m.pass == 1) {
            let p = m.predictor.predict(BlockView::new(&blocks), &rows)?;
            out.insert(c, clamp_all(reg, c, p)?);
        }
        let sources: Vec<(ConstructId, Vec<f64>)> = self
            .proxy_sources
            .iter()
            .map(|c| {
                out.get(c)
                    .cloned()
                    .map(|v| (*c, v))
                    .ok_or_else(|| Error::SchemaMismatch(format!("proxy source {c} has no model")))
            })
            .collect::<Result<_>>()?;
        let proxy = proxy_block(&cohort.participants, &sources);
        let view = BlockView {
            base: &blocks,
            proxy: Some(&proxy),
        };
        for (&c, m) in self.constructs.iter().filter(|(_, m)| m.pass == 2) {
            let p = m.predictor.predict(view, &rows)?;
            out.insert(c, clamp_all(reg, c, p)?);
        }
        Ok(out)
    }

    pub fn to_writer<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn from_reader<R: Read>(r: R) -> Result<EnsembleModel> {
        let v: serde_json::Value = serde_json::from_reader(r)?;
        let found = v.get("format_version").and_then(|x| x.as_u64()).unwrap_or(0) as u32;
        if found != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found,
                expected: FORMAT_VERSION,
            });
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_writer(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<EnsembleModel> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        EnsembleModel::from_reader(std::io::BufReader::new(f))
    }
}

/// Result of one full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub seed: u64,
    pub config_hash: String,
    pub train_ids: Vec<ParticipantId>,
    pub validation_ids: Vec<ParticipantId>,
    pub plan: FoldPlan,
    pub train_targets: Vec<[Option<f64>; 19]>,
    pub validation_targets: Vec<[Option<f64>; 19]>,
    pub results: BTreeMap<ConstructId, ConstructResult>,
    /// Preprocessors per context; the last one is fitted on all training folds.
    pub preprocessors: Vec<Preprocessor>,
    #[serde(skip)]
    pub audit: Vec<AuditEntry>,
}

// ---------------------------------------------------------------------------
// Orchestration

struct Context {
    pre: Preprocessor,
    blocks: BTreeMap<ModalityKind, DenseBlock>,
}

struct Layout {
    /// Cohort rows of the training set, in plan order.
    t_rows: Vec<usize>,
    v_rows: Vec<usize>,
    /// Cohort rows per fold.
    fold_rows: Vec<Vec<usize>>,
}

impl Layout {
    fn train_excluding(&self, folds: &[usize]) -> Vec<usize> {
        let mut rows: Vec<usize> = (0..self.fold_rows.len())
            .filter(|f| !folds.contains(f))
            .flat_map(|f| self.fold_rows[f].iter().copied())
            .collect();
        rows.sort_unstable();
        rows
    }
}

fn fit_context(cohort: &Cohort, rows: &[usize], cfg: &ValidatedConfig, seed: u64, audit: bool) -> Result<(Context, Vec<AuditEntry>)> {
    let (pre, blocks, entries) = Preprocessor::fit_transform(cohort, rows, cfg, seed, audit)?;
    Ok((Context { pre, blocks }, entries))
}

fn with_target(rows: &[usize], target: &[Option<f64>]) -> (Vec<usize>, Vec<f64>) {
    rows.iter().filter_map(|&r| target[r].map(|y| (r, y))).unzip()
}

struct FoldEval {
    masks: Vec<SelectionMask>,
    preds: Vec<std::result::Result<Vec<f64>, String>>,
}

struct Job<'a> {
    cohort: &'a Cohort,
    cfg: &'a ValidatedConfig,
    layout: &'a Layout,
    pass: u8,
}

impl Job<'_> {
    fn eval_fold(&self, c: ConstructId, f: usize, view: BlockView<'_>) -> FoldEval {
        let cfg = self.cfg;
        let kind = cfg.constructs.get(c).kind;
        let target = self.cohort.target(c);
        let (rows, y) = with_target(&self.layout.train_excluding(&[f]), &target);
        let test = &self.layout.fold_rows[f];
        let masks = select_masks(view, &rows, &y, c, cfg);
        let preds = cfg
            .candidates_for(kind)
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let seed = derive_seed(cfg.seed, &[2, self.pass as u64, c.index() as u64, f as u64, i as u64]);
                fit_predictor(spec, c, kind, cfg.fusion_mode, view, masks.clone(), &rows, &y, seed)
                    .and_then(|m| m.predict(view, test))
                    .and_then(|p| clamp_all(&cfg.constructs, c, p))
                    .map_err(|e| {
                        log::info!("{c} fold {f} {}: {e}", spec.label());
                        e.to_string()
                    })
            })
            .collect();
        FoldEval { masks, preds }
    }

    /// Score candidates from per-fold evaluations and assemble F.
    fn select(&self, c: ConstructId, evals: Vec<FoldEval>) -> (Vec<CandidateRecord>, Vec<Vec<SelectionMask>>, Vec<usize>) {
        let cfg = self.cfg;
        let kind = cfg.constructs.get(c).kind;
        let target = self.cohort.target(c);
        let k = self.layout.fold_rows.len();
        let specs = cfg.candidates_for(kind);
        let mut records = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let mut rec = CandidateRecord {
                spec: spec.clone(),
                label: spec.label(),
                fold_predictions: Vec::with_capacity(k),
                fold_scores: Vec::with_capacity(k),
                fold_smape: Vec::with_capacity(k),
                score: None,
                smape: None,
                error: None,
            };
            for (f, ev) in evals.iter().enumerate() {
                match &ev.preds[i] {
                    Ok(p) => {
                        let (pr, ac): (Vec<f64>, Vec<f64>) = self.layout.fold_rows[f]
                            .iter()
                            .zip(p)
                            .filter_map(|(&r, &v)| target[r].map(|a| (v, a)))
                            .unzip();
                        let (s, m) = fold_score(kind, &pr, &ac);
                        rec.fold_predictions.push(Some(p.clone()));
                        rec.fold_scores.push(s);
                        rec.fold_smape.push(m);
                    }
                    Err(e) => {
                        rec.fold_predictions.push(None);
                        rec.fold_scores.push(None);
                        rec.fold_smape.push(None);
                        rec.error.get_or_insert_with(|| format!("fold {f}: {e}"));
                    }
                }
            }
            if rec.error.is_none() {
                rec.score = mean_of(rec.fold_scores.iter().flatten().copied());
                rec.smape = mean_of(rec.fold_smape.iter().flatten().copied());
            } else {
                log::warn!("{c} {}: candidate failed, scored -inf", rec.label);
            }
            records.push(rec);
        }
        let masks = evals.into_iter().map(|e| e.masks).collect();
        let ranking = rank_candidates(&records);
        (records, masks, ranking)
    }

    /// Refit ranked candidates on all training folds until one succeeds.
    fn refit(&self, c: ConstructId, ranking: &[usize], view: BlockView<'_>) -> Result<(usize, FittedPredictor)> {
        let cfg = self.cfg;
        let kind = cfg.constructs.get(c).kind;
        let target = self.cohort.target(c);
        let (rows, y) = with_target(&self.layout.t_rows, &target);
        let masks = select_masks(view, &rows, &y, c, cfg);
        let specs = cfg.candidates_for(kind);
        let k = self.layout.fold_rows.len() as u64;
        let mut last = Error::EmptyFusion;
        for &i in ranking {
            let seed = derive_seed(cfg.seed, &[2, self.pass as u64, c.index() as u64, k, i as u64]);
            match fit_predictor(&specs[i], c, kind, cfg.fusion_mode, view, masks.clone(), &rows, &y, seed) {
                Ok(m) => return Ok((i, m)),
                Err(e) => {
                    log::warn!("{c}: refit of {} failed: {e}", specs[i].label());
                    last = e;
                }
            }
        }
        Err(last)
    }

    /// Full evaluation of `constructs`; `views[f]` is the view of context `f`.
    fn run(&self, constructs: &[ConstructId], views: &[BlockView<'_>]) -> Result<BTreeMap<ConstructId, (ConstructResult, FittedPredictor)>> {
        let k = self.layout.fold_rows.len();
        let cells: Vec<(ConstructId, usize)> = constructs
            .iter()
            .flat_map(|&c| (0..k).map(move |f| (c, f)))
            .collect();
        let mut evals = par::map(&cells, |&(c, f)| self.eval_fold(c, f, views[f])).into_iter();
        let mut selections = Vec::new();
        for &c in constructs {
            let ev: Vec<FoldEval> = evals.by_ref().take(k).collect();
            selections.push((c, self.select(c, ev)));
        }
        let refits = par::map(&selections, |(c, (_, _, ranking))| self.refit(*c, ranking, views[k]));
        let mut out = BTreeMap::new();
        for ((c, (records, masks, _)), refit) in selections.into_iter().zip(refits) {
            let (selected, model) = match refit {
                Ok(x) => x,
                Err(e) => {
                    log::warn!("{c}: no candidate could be refitted ({e}); construct skipped");
                    continue;
                }
            };
            let oof = match self.assemble_oof(&records[selected]) {
                Some(v) => v,
                None => {
                    log::warn!("{c}: selected candidate has no complete fold predictions; construct skipped");
                    continue;
                }
            };
            let validation = clamp_all(&self.cfg.constructs, c, model.predict(views[k], &self.layout.v_rows)?)?;
            out.insert(
                c,
                (
                    ConstructResult {
                        construct: c,
                        kind: self.cfg.constructs.get(c).kind,
                        pass: self.pass,
                        candidates: records,
                        selected,
                        fold_masks: masks,
                        oof,
                        validation,
                        first_pass: None,
                    },
                    model,
                ),
            );
        }
        Ok(out)
    }

    /// F aligned with the training rows.
    fn assemble_oof(&self, rec: &CandidateRecord) -> Option<Vec<f64>> {
        let pos: BTreeMap<usize, usize> = self.layout.t_rows.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        let mut oof = vec![f64::NAN; self.layout.t_rows.len()];
        for (f, rows) in self.layout.fold_rows.iter().enumerate() {
            let p = rec.fold_predictions[f].as_ref()?;
            for (&r, &v) in rows.iter().zip(p) {
                oof[pos[&r]] = v;
            }
        }
        Some(oof)
    }
}

/// Run the joint model on `cohort`.
pub fn run_joint_model(cohort: &Cohort, cfg: &ValidatedConfig) -> Result<(RunOutput, EnsembleModel)> {
    let n = cohort.len();
    let (t_rows, v_rows) = split_holdout(n, cfg.holdout_fraction, derive_seed(cfg.seed, &[4]));
    let train_ids: Vec<ParticipantId> = t_rows.iter().map(|&r| cohort.participants[r].clone()).collect();
    let plan = make_fold_plan(&train_ids, cfg.folds, derive_seed(cfg.seed, &[5]))?;
    let k = plan.k;
    let fold_rows: Vec<Vec<usize>> = (0..k)
        .map(|f| plan.members(f).into_iter().map(|i| t_rows[i]).collect())
        .collect();
    let layout = Layout {
        t_rows,
        v_rows,
        fold_rows,
    };

    let contexts = par::map_range(k + 1, |f| {
        let excluded: Vec<usize> = if f < k { vec![f] } else { Vec::new() };
        let rows = layout.train_excluding(&excluded);
        fit_context(cohort, &rows, cfg, derive_seed(cfg.seed, &[1, f as u64]), f == k)
    });
    let mut ctx = Vec::with_capacity(k + 1);
    let mut audit = Vec::new();
    for c in contexts {
        let (c, a) = c?;
        ctx.push(c);
        audit = a;
    }
    let views: Vec<BlockView<'_>> = ctx.iter().map(|c| BlockView::new(&c.blocks)).collect();
    log::info!("{} fold contexts fitted", k + 1);

    let constructs: Vec<ConstructId> = ConstructId::ALL
        .iter()
        .copied()
        .filter(|&c| {
            let t = cohort.target(c);
            let have = layout.t_rows.iter().filter(|&&r| t[r].is_some()).count();
            if have < k * 2 {
                log::warn!("{c}: {have} training targets; construct skipped");
            }
            have >= k * 2
        })
        .collect();
    let pass1 = Job {
        cohort,
        cfg,
        layout: &layout,
        pass: 1,
    };
    let mut results = pass1.run(&constructs, &views)?;
    log::info!("first pass: {} constructs", results.len());

    let sources: Vec<ConstructId> = PROXY_SOURCES.iter().copied().filter(|c| results.contains_key(c)).collect();
    let mut proxy_sources = Vec::new();
    if cfg.proxy_pass && !sources.is_empty() && k < 3 {
        log::warn!("proxy pass needs at least 3 folds; skipped");
    } else if cfg.proxy_pass && !sources.is_empty() {
        let blocks = proxy_blocks(cohort, cfg, &layout, &sources, &results)?;
        log::info!("proxy columns built from {} nested contexts", k * (k - 1) / 2);
        let views2: Vec<BlockView<'_>> = ctx
            .iter()
            .zip(&blocks)
            .map(|(c, p)| BlockView {
                base: &c.blocks,
                proxy: Some(p),
            })
            .collect();
        let rest: Vec<ConstructId> = constructs.iter().copied().filter(|c| !sources.contains(c)).collect();
        let pass2 = Job { pass: 2, ..pass1 };
        for (c, (mut res, model)) in pass2.run(&rest, &views2)? {
            if let Some((first, _)) = results.get(&c) {
                res.first_pass = Some(PassSummary {
                    selected: first.candidates[first.selected].label.clone(),
                    score: first.candidates[first.selected].score,
                    oof: first.oof.clone(),
                });
            }
            results.insert(c, (res, model));
        }
        proxy_sources = sources;
        log::info!("second pass complete");
    }

    let idx = |rows: &[usize]| -> Vec<[Option<f64>; 19]> { rows.iter().map(|&r| cohort.targets[r]).collect() };
    let mut model_set = BTreeMap::new();
    let mut result_set = BTreeMap::new();
    for (c, (res, predictor)) in results {
        model_set.insert(
            c,
            ConstructModel {
                pass: res.pass,
                spec: res.selected_spec().clone(),
                predictor,
            },
        );
        result_set.insert(c, res);
    }
    let final_pre = ctx[k].pre.clone();
    let model = EnsembleModel {
        format_version: FORMAT_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        config: cfg.clone(),
        preprocessor: final_pre,
        proxy_sources,
        constructs: model_set,
    };
    let out = RunOutput {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        train_ids,
        validation_ids: layout.v_rows.iter().map(|&r| cohort.participants[r].clone()).collect(),
        plan,
        train_targets: idx(&layout.t_rows),
        validation_targets: idx(&layout.v_rows),
        results: result_set,
        preprocessors: ctx.into_iter().map(|c| c.pre).collect(),
        audit,
    };
    Ok((out, model))
}

/// Proxy blocks for every context. Context `f` picks each source's
/// candidate from inner fits only: models trained without folds `f` and `j`,
/// scored on fold `j`. Fold `f` rows take that candidate's first-pass
/// prediction, fold `j` rows its inner prediction. The final context sees F
/// on training rows and P on validation rows.
fn proxy_blocks(
    cohort: &Cohort,
    cfg: &ValidatedConfig,
    layout: &Layout,
    sources: &[ConstructId],
    results: &BTreeMap<ConstructId, (ConstructResult, FittedPredictor)>,
) -> Result<Vec<DenseBlock>> {
    let n = cohort.len();
    let k = layout.fold_rows.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect();
    // inner[pair][source][candidate]: predictions on both held-out folds
    let inner = par::map(&pairs, |&(a, b)| -> Result<Vec<Vec<Option<Vec<f64>>>>> {
        let rows = layout.train_excluding(&[a, b]);
        let (ctx, _) = fit_context(cohort, &rows, cfg, derive_seed(cfg.seed, &[6, a as u64, b as u64]), false)?;
        let view = BlockView::new(&ctx.blocks);
        let apply: Vec<usize> = layout.fold_rows[a].iter().chain(&layout.fold_rows[b]).copied().collect();
        Ok(sources
            .iter()
            .map(|&s| {
                let target = cohort.target(s);
                let (tr, y) = with_target(&rows, &target);
                let masks = select_masks(view, &tr, &y, s, cfg);
                let kind = cfg.constructs.get(s).kind;
                cfg.candidates_for(kind)
                    .iter()
                    .enumerate()
                    .map(|(ci, spec)| {
                        let seed = derive_seed(cfg.seed, &[3, s.index() as u64, a as u64, b as u64, ci as u64]);
                        let pred = fit_predictor(spec, s, kind, cfg.fusion_mode, view, masks.clone(), &tr, &y, seed)
                            .and_then(|m| m.predict(view, &apply))
                            .and_then(|p| clamp_all(&cfg.constructs, s, p));
                        match pred {
                            Ok(p) => {
                                let mut v = vec![f64::NAN; n];
                                for (&r, x) in apply.iter().zip(p) {
                                    v[r] = x;
                                }
                                Some(v)
                            }
                            Err(e) => {
                                log::debug!("inner proxy {s} {} without folds {a},{b}: {e}", spec.label());
                                None
                            }
                        }
                    })
                    .collect()
            })
            .collect())
    });
    let inner: Vec<Vec<Vec<Option<Vec<f64>>>>> = inner.into_iter().collect::<Result<_>>()?;
    let pair_index = |a: usize, b: usize| pairs.iter().position(|&p| p == (a.min(b), a.max(b))).expect("pair");

    let mut out = Vec::with_capacity(k + 1);
    for f in 0..k {
        let mut cols = Vec::with_capacity(sources.len());
        for (si, &s) in sources.iter().enumerate() {
            let res = &results[&s].0;
            let target = cohort.target(s);
            let kind = res.kind;
            let keys: Vec<(Option<f64>, Option<f64>, &str)> = res
                .candidates
                .iter()
                .enumerate()
                .map(|(ci, cand)| {
                    if cand.fold_predictions[f].is_none() {
                        return (None, None, cand.label.as_str());
                    }
                    let (mut scores, mut smapes) = (Vec::new(), Vec::new());
                    for j in (0..k).filter(|&j| j != f) {
                        let Some(p) = &inner[pair_index(f, j)][si][ci] else {
                            return (None, None, cand.label.as_str());
                        };
                        let (pr, ac): (Vec<f64>, Vec<f64>) = layout.fold_rows[j]
                            .iter()
                            .filter_map(|&r| target[r].map(|a| (p[r], a)))
                            .unzip();
                        let (sc, sm) = fold_score(kind, &pr, &ac);
                        scores.extend(sc);
                        smapes.extend(sm);
                    }
                    (mean_of(scores.into_iter()), mean_of(smapes.into_iter()), cand.label.as_str())
                })
                .collect();
            let chosen = rank_keys(&keys).into_iter().find(|&ci| keys[ci].0.is_some());
            let mut v = vec![0.0; n];
            match chosen {
                Some(ci) => {
                    let own = res.candidates[ci].fold_predictions[f].as_ref().expect("checked above");
                    for (&r, &x) in layout.fold_rows[f].iter().zip(own) {
                        v[r] = x;
                    }
                    for j in (0..k).filter(|&j| j != f) {
                        let p = inner[pair_index(f, j)][si][ci].as_ref().expect("checked above");
                        for &r in &layout.fold_rows[j] {
                            v[r] = p[r];
                        }
                    }
                }
                None => {
                    log::warn!("no proxy candidate for {s} in context {f}; using the training mean");
                    let (_, y) = with_target(&layout.train_excluding(&[f]), &target);
                    let m = mean_of(y.into_iter()).unwrap_or(0.0);
                    for rows in &layout.fold_rows {
                        for &r in rows {
                            v[r] = m;
                        }
                    }
                }
            }
            cols.push((s, v));
        }
        out.push(proxy_block(&cohort.participants, &cols));
    }
    let last: Vec<(ConstructId, Vec<f64>)> = sources
        .iter()
        .map(|&s| {
            let res = &results[&s].0;
            let mut v = vec![0.0; n];
            for (&r, &x) in layout.t_rows.iter().zip(&res.oof) {
                v[r] = x;
            }
            for (&r, &x) in layout.v_rows.iter().zip(&res.validation) {
                v[r] = x;
            }
            (s, v)
        })
        .collect();
    out.push(proxy_block(&cohort.participants, &last));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::RangeRules;
    use crate::models::Family;
    use crate::synth::{generate, CohortSpec};

    fn ids(n: usize) -> Vec<ParticipantId> {
        (0..n).map(|i| ParticipantId::new(format!("p{i:03}"))).collect()
    }

    #[test]
    fn fold_sizes_follow_round_robin() {
        assert_eq!(make_fold_plan(&ids(10), 5, 1).unwrap().sizes(), vec![2; 5]);
        let mut s = make_fold_plan(&ids(11), 5, 1).unwrap().sizes();
        s.sort_unstable();
        assert_eq!(s, vec![2, 2, 2, 2, 3]);
        assert_eq!(make_fold_plan(&ids(37), 5, 9).unwrap(), make_fold_plan(&ids(37), 5, 9).unwrap());
        assert!(matches!(
            make_fold_plan(&ids(4), 5, 1),
            Err(Error::TooFewParticipants { available: 4, folds: 5 })
        ));
    }

    #[test]
    fn holdout_partitions_rows() {
        let (t, v) = split_holdout(50, 0.2, 3);
        assert_eq!(v.len(), 10);
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    fn block(m: ModalityKind, n: usize, p: usize, prefix: &str) -> DenseBlock {
        DenseBlock {
            modality: m,
            columns: (0..p).map(|j| format!("{prefix}{j}")).collect(),
            participants: ids(n),
            data: DMatrix::from_fn(n, p, |i, j| (i * 100 + j) as f64),
        }
    }

    fn full_mask(b: &DenseBlock) -> SelectionMask {
        SelectionMask {
            construct: ConstructId::Sleep,
            modality: b.modality,
            entries: b.columns.iter().map(|c| (c.clone(), 0.5)).collect(),
        }
    }

    #[test]
    fn fuse_concatenates_in_modality_order() {
        let a = block(ModalityKind::Wearable, 6, 20, "w");
        let b = block(ModalityKind::SocialMedia, 6, 5, "s");
        let base: BTreeMap<_, _> = [(a.modality, a.clone()), (b.modality, b.clone())].into();
        let masks = vec![full_mask(&b), full_mask(&a)];
        let mods = [ModalityKind::Wearable, ModalityKind::SocialMedia];
        let (x, names) = fuse(BlockView::new(&base), &masks, &mods, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(x.shape(), (6, 25));
        assert_eq!(names[0], "Wearable:w0");
        assert_eq!(names[20], "SocialMedia:s0");
        assert_eq!(x[(2, 21)], 201.0);
        // row order follows the requested rows; columns do not move
        let (y, names2) = fuse(BlockView::new(&base), &masks, &mods, &[5, 4, 3, 2, 1, 0]).unwrap();
        assert_eq!(names, names2);
        assert_eq!(y.row(0), x.row(5));
        assert!(matches!(
            fuse(BlockView::new(&base), &[], &mods, &[0]),
            Err(Error::EmptyFusion)
        ));
    }

    #[test]
    fn vote_takes_smallest_modal_label() {
        assert_eq!(vote(&[2.0, 1.0, 2.0, 1.0, 3.0]), 1.0);
        assert_eq!(vote(&[3.0, 3.0, 1.0]), 3.0);
    }

    fn quick_cfg(seed: u64) -> ValidatedConfig {
        let mut cfg = ValidatedConfig::default();
        cfg.seed = seed;
        cfg.candidates = vec![
            CandidateSpec::new(Family::Ridge),
            CandidateSpec::new(Family::Cart),
            CandidateSpec::new(Family::RandomForest).with("trees", 20.0),
        ];
        cfg.bootstrap_samples = 200;
        cfg
    }

    fn cohort(n: usize, seed: u64) -> Cohort {
        let spec = CohortSpec {
            n_participants: n,
            days: 3,
            seed,
            ..CohortSpec::default()
        };
        let cfg = ValidatedConfig::default();
        let u = generate(&spec).unwrap().universe(&RangeRules::new(cfg.screening_rules.clone())).unwrap();
        Cohort::build(&u, &cfg).unwrap()
    }

    fn row_of(c: &Cohort, p: &ParticipantId) -> usize {
        c.participants.iter().position(|q| q == p).unwrap()
    }

    #[test]
    fn out_of_fold_predictions_ignore_own_target_and_fold_features() {
        let cfg = quick_cfg(11);
        let base = cohort(60, 2);
        let (a, _) = run_joint_model(&base, &cfg).unwrap();
        // perturb every target and feature value of fold 0
        let fold0: Vec<usize> = a.plan.members(0).iter().map(|&i| row_of(&base, &a.plan.participants[i])).collect();
        let mut edited = base.clone();
        for &r in &fold0 {
            for t in edited.targets[r].iter_mut().flatten() {
                *t += 0.37;
            }
            for b in edited.static_blocks.values_mut() {
                for c in 0..b.n_cols() {
                    if let Some(v) = b.get(r, c) {
                        b.set(r, c, Some(v * 1.5 + 1.0));
                    }
                }
            }
        }
        let (b, _) = run_joint_model(&edited, &cfg).unwrap();
        assert_eq!(a.preprocessors[0], b.preprocessors[0]);
        for (c, ra) in &a.results {
            let rb = &b.results[c];
            assert_eq!(ra.fold_masks[0], rb.fold_masks[0], "{c} masks");
            for cand in 0..ra.candidates.len() {
                assert_eq!(
                    ra.candidates[cand].fold_predictions[0].is_some(),
                    rb.candidates[cand].fold_predictions[0].is_some()
                );
            }
        }
        // target-only perturbation: F is bit-identical for every construct
        let mut tgt = base.clone();
        for &r in &fold0 {
            for t in tgt.targets[r].iter_mut().flatten() {
                *t += 0.37;
            }
        }
        let (c, _) = run_joint_model(&tgt, &cfg).unwrap();
        for (id, ra) in &a.results {
            let rc = &c.results[id];
            for (cand_a, cand_c) in ra.candidates.iter().zip(&rc.candidates) {
                assert_eq!(cand_a.fold_predictions[0], cand_c.fold_predictions[0], "{id} {}", cand_a.label);
            }
        }
    }

    #[test]
    fn validation_rows_never_reach_training() {
        let cfg = quick_cfg(4);
        let base = cohort(60, 8);
        let (a, _) = run_joint_model(&base, &cfg).unwrap();
        let mut edited = base.clone();
        for p in &a.validation_ids {
            let r = row_of(&base, p);
            for t in edited.targets[r].iter_mut().flatten() {
                *t = -*t;
            }
            for b in edited.static_blocks.values_mut() {
                for c in 0..b.n_cols() {
                    b.set(r, c, Some(1.0e4));
                }
            }
            for s in edited.slots.values_mut() {
                s[r] = None;
            }
        }
        let (b, _) = run_joint_model(&edited, &cfg).unwrap();
        assert_eq!(a.preprocessors, b.preprocessors);
        for (c, ra) in &a.results {
            let rb = &b.results[c];
            assert_eq!(ra.fold_masks, rb.fold_masks);
            assert_eq!(ra.oof, rb.oof);
            assert_eq!(ra.selected, rb.selected);
        }
    }

    #[test]
    fn model_replays_validation_predictions() {
        let cfg = quick_cfg(7);
        let base = cohort(50, 3);
        let (run, model) = run_joint_model(&base, &cfg).unwrap();
        let mut buf = Vec::new();
        model.to_writer(&mut buf).unwrap();
        let back = EnsembleModel::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        let preds = back.predict(&base).unwrap();
        for (c, res) in &run.results {
            for (p, &v) in run.validation_ids.iter().zip(&res.validation) {
                let x = preds[c][row_of(&base, p)];
                assert!((x - v).abs() <= 1e-12, "{c}: {x} vs {v}");
            }
        }
        let mut json: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        json["format_version"] = 99.into();
        assert!(matches!(
            EnsembleModel::from_reader(json.to_string().as_bytes()),
            Err(Error::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn proxy_pass_skips_sources_and_scores_replay() {
        let cfg = quick_cfg(5);
        let base = cohort(60, 6);
        let (run, model) = run_joint_model(&base, &cfg).unwrap();
        assert_eq!(model.proxy_sources, PROXY_SOURCES.to_vec());
        for (c, res) in &run.results {
            let own = proxy_column(*c);
            if PROXY_SOURCES.contains(c) {
                assert_eq!(res.pass, 1);
            } else {
                assert_eq!(res.pass, 2);
                assert!(res.first_pass.is_some());
            }
            for masks in &res.fold_masks {
                assert!(masks.iter().all(|m| m.names().all(|n| n != own)));
            }
            // every fold score follows from the logged predictions
            let target = base.target(*c);
            for cand in &res.candidates {
                for (f, p) in cand.fold_predictions.iter().enumerate() {
                    let Some(p) = p else { continue };
                    let (pr, ac): (Vec<f64>, Vec<f64>) = run
                        .plan
                        .members(f)
                        .iter()
                        .zip(p)
                        .filter_map(|(&i, &v)| target[row_of(&base, &run.plan.participants[i])].map(|a| (v, a)))
                        .unzip();
                    assert_eq!(fold_score(res.kind, &pr, &ac).0, cand.fold_scores[f]);
                }
            }
            assert_eq!(res.oof.len(), run.train_ids.len());
            assert!(res.oof.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = quick_cfg(21);
        let base = cohort(40, 1);
        let (a, ma) = run_joint_model(&base, &cfg).unwrap();
        let (b, mb) = run_joint_model(&base, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(serde_json::to_string(&ma).unwrap(), serde_json::to_string(&mb).unwrap());
    }
}
