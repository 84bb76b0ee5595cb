//! Higher-order network features from discretized heart-rate and stress
//! series.
//!
//! A series is averaged into fixed slots, each slot mean is binned into a
//! symbol, and for each order `n` the table of conditional probabilities
//! `P(x_t | x_{t-n}, ..., x_{t-1}) = I(context, next) / I(context)` is
//! counted within gap-free segments. Cohort rows are the flattened tables;
//! PCA compresses them to a short embedding.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ParticipantId, TimeSeries};
use crate::reduce::{self, PcaModel};

pub type Symbol = u8;

/// Ascending cut points. A value maps to the number of edges it is
/// greater than or equal to, so `k` edges give `k + 1` symbols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub edges: Vec<f64>,
}

impl BinSpec {
    pub fn new(mut edges: Vec<f64>) -> Self {
        edges.sort_by(f64::total_cmp);
        BinSpec { edges }
    }

    /// Equal-frequency bins from a pool of values (terciles for `bins = 3`).
    pub fn quantiles(values: &[f64], bins: usize) -> Self {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        v.sort_by(f64::total_cmp);
        if v.is_empty() || bins < 2 {
            return BinSpec { edges: Vec::new() };
        }
        let edges = (1..bins)
            .map(|i| {
                let pos = i as f64 / bins as f64 * (v.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
            })
            .collect();
        BinSpec::new(edges)
    }

    pub fn symbol(&self, value: f64) -> Symbol {
        self.edges.iter().filter(|&&e| value >= e).count() as Symbol
    }

    pub fn alphabet(&self) -> usize {
        self.edges.len() + 1
    }
}

/// Slot means split into gap-free segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotMeans {
    pub slot_minutes: u32,
    pub segments: Vec<Vec<f64>>,
}

/// Average a series into `slot_minutes` slots aligned to the Unix epoch.
/// Slots without samples are dropped and break the sequence.
pub fn slot_means(ts: &TimeSeries, slot_minutes: u32) -> Result<SlotMeans> {
    if ts.points.is_empty() {
        return Err(Error::EmptySeries);
    }
    if slot_minutes == 0 {
        return Err(Error::config("slot_minutes", "must be positive"));
    }
    let width = slot_minutes as i64 * 60;
    let mut segments: Vec<Vec<f64>> = Vec::new();
    let mut current: Option<(i64, f64, usize)> = None;
    let mut last_slot: Option<i64> = None;
    let mut flush = |slot: i64, sum: f64, n: usize, segments: &mut Vec<Vec<f64>>| {
        let mean = sum / n as f64;
        match last_slot {
            Some(prev) if prev + 1 == slot => segments.last_mut().expect("open segment").push(mean),
            _ => segments.push(vec![mean]),
        }
        last_slot = Some(slot);
    };
    for &(t, v) in &ts.points {
        let slot = t.timestamp().div_euclid(width);
        match current {
            Some((s, sum, n)) if s == slot => current = Some((s, sum + v, n + 1)),
            Some((s, sum, n)) => {
                flush(s, sum, n, &mut segments);
                current = Some((slot, v, 1));
            }
            None => current = Some((slot, v, 1)),
        }
    }
    if let Some((s, sum, n)) = current {
        flush(s, sum, n, &mut segments);
    }
    Ok(SlotMeans {
        slot_minutes,
        segments,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSeries {
    pub participant: ParticipantId,
    pub slot_minutes: u32,
    /// Symbol runs; no transition is counted across segment boundaries.
    pub segments: Vec<Vec<Symbol>>,
}

impl DiscreteSeries {
    pub fn from_means(participant: ParticipantId, means: &SlotMeans, bins: &BinSpec) -> Self {
        DiscreteSeries {
            participant,
            slot_minutes: means.slot_minutes,
            segments: means
                .segments
                .iter()
                .map(|s| s.iter().map(|&m| bins.symbol(m)).collect())
                .collect(),
        }
    }
}

pub fn discretize(ts: &TimeSeries, slot_minutes: u32, bins: &BinSpec) -> Result<DiscreteSeries> {
    let means = slot_means(ts, slot_minutes)?;
    Ok(DiscreteSeries::from_means(
        ts.participant.clone(),
        &means,
        bins,
    ))
}

/// Fixed-order conditional transition table.
#[derive(Debug, Clone, PartialEq)]
pub struct HonModel {
    pub order: usize,
    /// I(context, next)
    pub counts: BTreeMap<(Vec<Symbol>, Symbol), u64>,
    /// I(context), counted over windows that have a successor.
    pub context_counts: BTreeMap<Vec<Symbol>, u64>,
}

impl HonModel {
    pub fn probability(&self, context: &[Symbol], next: Symbol) -> Option<f64> {
        let total = *self.context_counts.get(context)?;
        let c = self
            .counts
            .get(&(context.to_vec(), next))
            .copied()
            .unwrap_or(0);
        Some(c as f64 / total as f64)
    }

    /// Every observed `(context, next, probability)`.
    pub fn probabilities(&self) -> impl Iterator<Item = (&[Symbol], Symbol, f64)> + '_ {
        self.counts.iter().map(move |((ctx, next), &c)| {
            let total = self.context_counts[ctx];
            (ctx.as_slice(), *next, c as f64 / total as f64)
        })
    }

    /// Edge list as `context,next,count,prob` rows.
    pub fn write_edges<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["context", "next", "count", "prob"])?;
        for ((ctx, next), &c) in &self.counts {
            let p = c as f64 / self.context_counts[ctx] as f64;
            wtr.write_record([
                symbols_label(ctx),
                symbols_label(&[*next]),
                c.to_string(),
                format!("{p:?}"),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<hon edges>", e))?;
        Ok(())
    }
}

fn symbols_label(s: &[Symbol]) -> String {
    s.iter()
        .map(|&x| {
            if x < 26 {
                (b'A' + x) as char
            } else {
                '?'
            }
        })
        .collect()
}

pub fn build_hon(ds: &DiscreteSeries, order: usize) -> Result<HonModel> {
    if order == 0 {
        return Err(Error::config("hon_orders", "order must be at least 1"));
    }
    if !ds.segments.iter().any(|s| s.len() > order) {
        return Err(Error::OrderTooHigh { order });
    }
    // count on borrowed windows, then own each distinct key once
    let mut windows: BTreeMap<&[Symbol], u64> = BTreeMap::new();
    for seg in &ds.segments {
        for w in seg.windows(order + 1) {
            *windows.entry(w).or_default() += 1;
        }
    }
    let mut counts: BTreeMap<(Vec<Symbol>, Symbol), u64> = BTreeMap::new();
    let mut context_counts: BTreeMap<Vec<Symbol>, u64> = BTreeMap::new();
    for (w, c) in windows {
        let ctx = w[..order].to_vec();
        *context_counts.entry(ctx.clone()).or_default() += c;
        counts.insert((ctx, w[order]), c);
    }
    Ok(HonModel {
        order,
        counts,
        context_counts,
    })
}

/// One cohort column: a `(order, context, next)` transition.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HonKey {
    pub order: usize,
    pub context: Vec<Symbol>,
    pub next: Symbol,
}

impl HonKey {
    pub fn name(&self, prefix: &str) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{prefix}.o{}:{}>{}",
            self.order,
            symbols_label(&self.context),
            symbols_label(&[self.next])
        );
        s
    }
}

/// Participant rows over the union of observed transition keys.
#[derive(Debug, Clone, PartialEq)]
pub struct HonMatrix {
    pub participants: Vec<ParticipantId>,
    pub columns: Vec<HonKey>,
    pub data: DMatrix<f64>,
}

type KeyRef<'a> = (usize, &'a [Symbol], Symbol);

fn key_ref(k: &HonKey) -> KeyRef<'_> {
    (k.order, k.context.as_slice(), k.next)
}

/// Union of keys across the cohort defines the columns; unobserved
/// transitions are 0. Column order is the key order, so the result does not
/// depend on participant order beyond row permutation.
pub fn vectorize_cohort(models: &[(ParticipantId, Vec<HonModel>)]) -> HonMatrix {
    let keys: BTreeSet<KeyRef<'_>> = models
        .iter()
        .flat_map(|(_, ms)| ms.iter().flat_map(|m| m.probabilities().map(|(c, n, _)| (m.order, c, n))))
        .collect();
    let columns: Vec<HonKey> = keys
        .into_iter()
        .map(|(order, context, next)| HonKey {
            order,
            context: context.to_vec(),
            next,
        })
        .collect();
    project_cohort(models, &columns)
}

/// Rows for `models` on a fixed column set; keys outside it are ignored.
pub fn project_cohort(models: &[(ParticipantId, Vec<HonModel>)], columns: &[HonKey]) -> HonMatrix {
    let sorted = columns.windows(2).all(|w| w[0] < w[1]);
    let index: BTreeMap<KeyRef<'_>, usize> = if sorted {
        BTreeMap::new()
    } else {
        columns.iter().enumerate().map(|(i, k)| (key_ref(k), i)).collect()
    };
    let find = |k: KeyRef<'_>| -> Option<usize> {
        if sorted {
            columns.binary_search_by(|c| key_ref(c).cmp(&k)).ok()
        } else {
            index.get(&k).copied()
        }
    };
    let mut data = DMatrix::zeros(models.len(), columns.len());
    for (r, (_, ms)) in models.iter().enumerate() {
        for m in ms {
            for (ctx, next, p) in m.probabilities() {
                if let Some(c) = find((m.order, ctx, next)) {
                    data[(r, c)] = p;
                }
            }
        }
    }
    HonMatrix {
        participants: models.iter().map(|(p, _)| p.clone()).collect(),
        columns: columns.to_vec(),
        data,
    }
}

/// PCA embedding fitted on training rows. Constant columns are dropped
/// before the fit; when fewer informative directions exist than requested,
/// the tail is padded with zero-variance components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HonEmbedder {
    pub columns: Vec<HonKey>,
    kept: Vec<usize>,
    pca: Option<PcaModel>,
    pub components: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HonEmbedding {
    pub participants: Vec<ParticipantId>,
    /// rows × components
    pub data: DMatrix<f64>,
}

impl HonEmbedder {
    pub fn fit(train: &HonMatrix, components: usize) -> Result<HonEmbedder> {
        let n = train.data.nrows();
        let kept: Vec<usize> = (0..train.data.ncols())
            .filter(|&c| {
                let col = train.data.column(c);
                col.iter().any(|&v| v != col[0])
            })
            .collect();
        let max = kept.len().min(n.saturating_sub(1));
        let fitted = components.min(max);
        if fitted < components {
            log::warn!(
                "{}",
                Error::RankDeficient {
                    requested: components,
                    available: fitted
                }
            );
        }
        let pca = if fitted > 0 {
            let x = train.data.select_columns(&kept);
            let names: Vec<String> = kept.iter().map(|&c| train.columns[c].name("hon")).collect();
            Some(reduce::pca_fit(&x, &names, fitted)?)
        } else {
            None
        };
        Ok(HonEmbedder {
            columns: train.columns.clone(),
            kept,
            pca,
            components,
        })
    }

    pub fn transform(&self, m: &HonMatrix) -> Result<HonEmbedding> {
        if m.columns != self.columns {
            return Err(Error::SchemaMismatch("HON columns differ from fit".into()));
        }
        let mut out = DMatrix::zeros(m.data.nrows(), self.components);
        if let Some(pca) = &self.pca {
            let x = m.data.select_columns(&self.kept);
            let z = pca.transform_dense(&x)?;
            out.columns_mut(0, z.ncols()).copy_from(&z);
        }
        Ok(HonEmbedding {
            participants: m.participants.clone(),
            data: out,
        })
    }
}

/// Fit on `matrix` and embed its own rows.
pub fn embed(matrix: &HonMatrix, components: usize) -> Result<HonEmbedding> {
    HonEmbedder::fit(matrix, components)?.transform(matrix)
}
