//! Daily and epoch summaries, beacon-derived workplace features and
//! regularity features computed from raw series.
//!
//! Column names are part of the on-disk contract:
//! `<signal>.<epoch>.<stat>`, `beacon.<name>`, `reg.<signal>.<epoch>.<family>`.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Duration, NaiveDate, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ParticipantId, SensorSeries, TimeSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Epoch {
    /// The whole day.
    Epoch0,
    /// [00:00, 09:00)
    EarlyMorning,
    /// [09:00, 18:00)
    Day,
    /// [18:00, 24:00)
    Evening,
}

impl Epoch {
    pub const ALL: [Epoch; 4] = [Epoch::Epoch0, Epoch::EarlyMorning, Epoch::Day, Epoch::Evening];
    pub const SUB: [Epoch; 3] = [Epoch::EarlyMorning, Epoch::Day, Epoch::Evening];

    pub fn name(self) -> &'static str {
        match self {
            Epoch::Epoch0 => "epoch0",
            Epoch::EarlyMorning => "early_morning",
            Epoch::Day => "day",
            Epoch::Evening => "evening",
        }
    }

    /// Local-clock hours `[start, end)` covered by the epoch.
    pub fn hours(self) -> std::ops::Range<u32> {
        match self {
            Epoch::Epoch0 => 0..24,
            Epoch::EarlyMorning => 0..9,
            Epoch::Day => 9..18,
            Epoch::Evening => 18..24,
        }
    }

    /// Sub-epoch for a local hour of day.
    pub fn of_hour(hour: u32) -> Epoch {
        match hour {
            0..=8 => Epoch::EarlyMorning,
            9..=17 => Epoch::Day,
            _ => Epoch::Evening,
        }
    }
}

impl fmt::Display for Epoch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SummaryStat {
    Mean,
    Median,
    Mode,
    Min,
    Max,
    Std,
}

impl SummaryStat {
    pub const ALL: [SummaryStat; 6] = [
        SummaryStat::Mean,
        SummaryStat::Median,
        SummaryStat::Mode,
        SummaryStat::Min,
        SummaryStat::Max,
        SummaryStat::Std,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SummaryStat::Mean => "mean",
            SummaryStat::Median => "median",
            SummaryStat::Mode => "mode",
            SummaryStat::Min => "min",
            SummaryStat::Max => "max",
            SummaryStat::Std => "std",
        }
    }
}

/// Named feature values, missing as `None`.
pub type FeatureRecord = BTreeMap<String, Option<f64>>;

fn local(t: DateTime<Utc>, offset_minutes: i32) -> chrono::NaiveDateTime {
    (t + Duration::minutes(offset_minutes as i64)).naive_utc()
}

/// Split a series by local clock time. `Epoch0` holds every point; each
/// point lands in exactly one sub-epoch.
pub fn epoch_partition(ts: &TimeSeries, offset_minutes: i32) -> BTreeMap<Epoch, TimeSeries> {
    let mut out: BTreeMap<Epoch, TimeSeries> = Epoch::ALL
        .iter()
        .map(|&e| (e, TimeSeries::new(ts.participant.clone(), ts.signal.clone())))
        .collect();
    for &(t, v) in &ts.points {
        let e = Epoch::of_hour(local(t, offset_minutes).hour());
        out.get_mut(&e).expect("sub-epoch present").points.push((t, v));
        out.get_mut(&Epoch::Epoch0)
            .expect("epoch0 present")
            .points
            .push((t, v));
    }
    out
}

pub fn stat(values: &[f64], s: SummaryStat) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    Some(match s {
        SummaryStat::Mean => values.iter().sum::<f64>() / n,
        SummaryStat::Median => {
            let mut v = values.to_vec();
            v.sort_by(f64::total_cmp);
            let m = v.len() / 2;
            if v.len() % 2 == 0 {
                (v[m - 1] + v[m]) / 2.0
            } else {
                v[m]
            }
        }
        SummaryStat::Mode => {
            // Mode of values rounded to the nearest integer; ties go to the
            // smallest value.
            let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
            for v in values {
                *counts.entry(v.round() as i64).or_default() += 1;
            }
            let best = counts.values().copied().max().unwrap_or(0);
            counts
                .into_iter()
                .find(|&(_, c)| c == best)
                .map(|(k, _)| k as f64)
                .unwrap_or(f64::NAN)
        }
        SummaryStat::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
        SummaryStat::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        SummaryStat::Std => {
            let mean = values.iter().sum::<f64>() / n;
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
        }
    })
}

pub fn summary_name(signal: &str, epoch: Epoch, s: SummaryStat) -> String {
    format!("{signal}.{}.{}", epoch.name(), s.name())
}

/// Summaries of one epoch on one local day. An empty slice gives missing
/// values for every requested stat.
pub fn summarize(
    ts: &TimeSeries,
    epoch: Epoch,
    stats: &[SummaryStat],
    day: NaiveDate,
    offset_minutes: i32,
) -> FeatureRecord {
    let hours = epoch.hours();
    let values: Vec<f64> = ts
        .points
        .iter()
        .filter_map(|&(t, v)| {
            let lt = local(t, offset_minutes);
            (lt.date() == day && hours.contains(&lt.hour())).then_some(v)
        })
        .collect();
    stats
        .iter()
        .map(|&s| (summary_name(&ts.signal, epoch, s), stat(&values, s)))
        .collect()
}

fn local_days(ts: &TimeSeries, offset_minutes: i32) -> Vec<NaiveDate> {
    let mut days: Vec<NaiveDate> = ts
        .points
        .iter()
        .map(|&(t, _)| local(t, offset_minutes).date())
        .collect();
    days.dedup();
    days.sort();
    days.dedup();
    days
}

// ---------------------------------------------------------------------------
// Beacons

pub const BREAK_THRESHOLDS_MIN: [i64; 3] = [5, 15, 30];

pub fn beacon_names() -> Vec<String> {
    let mut v = vec![
        "beacon.time_at_work".to_string(),
        "beacon.pct_time_at_desk".to_string(),
    ];
    v.extend(
        BREAK_THRESHOLDS_MIN
            .iter()
            .map(|m| format!("beacon.breaks_gt_{m}min")),
    );
    v
}

/// Workplace features for one local day from tagged sightings
/// (`office`, `home`, `keychain`, `backpack` → RSSI series).
///
/// `time_at_work` is in hours. Consecutive office sightings further apart
/// than a threshold count as a break for every threshold they exceed.
/// Desk time accrues over non-break gaps that start with a sighting at or
/// above `rssi_cutoff`.
pub fn beacon_features(
    sightings: &BTreeMap<String, TimeSeries>,
    day: NaiveDate,
    offset_minutes: i32,
    rssi_cutoff: f64,
) -> FeatureRecord {
    let names = beacon_names();
    let office: Vec<(DateTime<Utc>, f64)> = sightings
        .get("office")
        .map(|ts| {
            ts.points
                .iter()
                .copied()
                .filter(|&(t, _)| local(t, offset_minutes).date() == day)
                .collect()
        })
        .unwrap_or_default();
    if office.is_empty() {
        return names.into_iter().map(|n| (n, None)).collect();
    }
    let first = office[0].0;
    let last = office[office.len() - 1].0;
    let span_min = (last - first).num_seconds() as f64 / 60.0;
    let mut breaks = [0usize; 3];
    let mut desk_min = 0.0;
    for w in office.windows(2) {
        let gap = (w[1].0 - w[0].0).num_seconds();
        for (i, &th) in BREAK_THRESHOLDS_MIN.iter().enumerate() {
            if gap > th * 60 {
                breaks[i] += 1;
            }
        }
        if gap <= BREAK_THRESHOLDS_MIN[0] * 60 && w[0].1 >= rssi_cutoff {
            desk_min += gap as f64 / 60.0;
        }
    }
    let pct = if span_min > 0.0 {
        Some(desk_min / span_min)
    } else {
        None
    };
    let values = [
        Some(span_min / 60.0),
        pct,
        Some(breaks[0] as f64),
        Some(breaks[1] as f64),
        Some(breaks[2] as f64),
    ];
    names.into_iter().zip(values).collect()
}

// ---------------------------------------------------------------------------
// Regularity

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularityFamily {
    Histogram,
    Circadian,
    DayCosine,
}

pub fn regularity_names(signal: &str) -> Vec<String> {
    let mut out = Vec::new();
    for e in Epoch::ALL {
        for h in e.hours() {
            out.push(format!("reg.{signal}.{}.hist_h{h:02}", e.name()));
        }
        out.push(format!("reg.{signal}.{}.circadian", e.name()));
        out.push(format!("reg.{signal}.{}.daycos", e.name()));
    }
    out
}

fn pearson_pairs(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Rhythm features per epoch: normalized hour-of-day activity histogram,
/// lag-24h correlation of hourly means, and mean cosine similarity of
/// consecutive daily histograms. Activity is the hourly mean shifted so the
/// series minimum is zero when negative values occur.
///
/// `weeks` limits the window to the most recent weeks (0 keeps all days).
pub fn regularity_features(
    ts: &TimeSeries,
    weeks: usize,
    offset_minutes: i32,
) -> Result<FeatureRecord> {
    let mut days = local_days(ts, offset_minutes);
    if weeks > 0 && days.len() > weeks * 7 {
        days.drain(..days.len() - weeks * 7);
    }
    if days.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} has {} day(s) of {}; need 2",
            ts.participant,
            days.len(),
            ts.signal
        )));
    }
    let first = days[0];
    let n_days = (days[days.len() - 1] - first).num_days() as usize + 1;
    let mut sums = vec![[0.0f64; 24]; n_days];
    let mut counts = vec![[0usize; 24]; n_days];
    let shift = ts
        .points
        .iter()
        .map(|p| p.1)
        .fold(f64::INFINITY, f64::min)
        .min(0.0);
    for &(t, v) in &ts.points {
        let lt = local(t, offset_minutes);
        if lt.date() < first {
            continue;
        }
        let d = (lt.date() - first).num_days() as usize;
        let h = lt.hour() as usize;
        sums[d][h] += v - shift;
        counts[d][h] += 1;
    }
    let hourly: Vec<[Option<f64>; 24]> = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| {
            let mut out = [None; 24];
            for h in 0..24 {
                if c[h] > 0 {
                    out[h] = Some(s[h] / c[h] as f64);
                }
            }
            out
        })
        .collect();

    let mut rec = FeatureRecord::new();
    let signal = &ts.signal;
    for e in Epoch::ALL {
        let hours: Vec<usize> = e.hours().map(|h| h as usize).collect();
        let mut hist = vec![0.0; hours.len()];
        for day in &hourly {
            for (i, &h) in hours.iter().enumerate() {
                hist[i] += day[h].unwrap_or(0.0);
            }
        }
        let total: f64 = hist.iter().sum();
        for (i, &h) in hours.iter().enumerate() {
            let v = (total > 0.0).then(|| hist[i] / total);
            rec.insert(format!("reg.{signal}.{}.hist_h{h:02}", e.name()), v);
        }

        let seq: Vec<Option<f64>> = hourly
            .iter()
            .flat_map(|day| hours.iter().map(move |&h| day[h]))
            .collect();
        let lag = hours.len();
        let pairs: Vec<(f64, f64)> = seq
            .iter()
            .zip(seq.iter().skip(lag))
            .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
            .collect();
        rec.insert(
            format!("reg.{signal}.{}.circadian", e.name()),
            pearson_pairs(&pairs),
        );

        let daily: Vec<Vec<f64>> = hourly
            .iter()
            .map(|day| hours.iter().map(|&h| day[h].unwrap_or(0.0)).collect())
            .collect();
        let sims: Vec<f64> = daily
            .windows(2)
            .filter_map(|w| cosine(&w[0], &w[1]))
            .collect();
        let daycos = (!sims.is_empty()).then(|| sims.iter().sum::<f64>() / sims.len() as f64);
        rec.insert(format!("reg.{signal}.{}.daycos", e.name()), daycos);
    }
    Ok(rec)
}

// ---------------------------------------------------------------------------
// Per-participant tables

/// Per-day feature values for one participant, in chronological order.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyTable {
    pub days: Vec<NaiveDate>,
    /// `values[d][c]` for day `d`, column `c`.
    pub values: Vec<Vec<Option<f64>>>,
}

/// Daily summary columns for the heart-rate-derived block.
pub fn daily_summary_names() -> Vec<String> {
    let mut out = Vec::new();
    for sig in crate::ingest::HEART_SIGNALS {
        for e in Epoch::ALL {
            for s in SummaryStat::ALL {
                out.push(summary_name(sig, e, s));
            }
        }
    }
    out
}

/// Every derived feature for one participant. Computed once per cohort;
/// nothing here is fitted, so it is fold-independent.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantDerived {
    pub participant: ParticipantId,
    pub summaries: DailyTable,
    pub beacon: DailyTable,
    pub regularity: FeatureRecord,
}

pub fn derive_participant(
    participant: &ParticipantId,
    series: &SensorSeries,
    offset_minutes: i32,
    rssi_cutoff: f64,
) -> ParticipantDerived {
    let summary_cols = daily_summary_names();
    let signals: Vec<&TimeSeries> = [&series.heart_rate, &series.stress]
        .into_iter()
        .flatten()
        .collect();
    let mut days: Vec<NaiveDate> = signals
        .iter()
        .flat_map(|ts| local_days(ts, offset_minutes))
        .collect();
    days.sort();
    days.dedup();
    let mut values = Vec::with_capacity(days.len());
    for &day in &days {
        let mut rec = FeatureRecord::new();
        for ts in &signals {
            for e in Epoch::ALL {
                rec.extend(summarize(ts, e, &SummaryStat::ALL, day, offset_minutes));
            }
        }
        values.push(
            summary_cols
                .iter()
                .map(|c| rec.get(c).copied().flatten())
                .collect(),
        );
    }
    let summaries = DailyTable { days, values };

    let beacon_cols = beacon_names();
    let mut bdays: Vec<NaiveDate> = series
        .beacons
        .values()
        .flat_map(|ts| local_days(ts, offset_minutes))
        .collect();
    bdays.sort();
    bdays.dedup();
    let bvalues = bdays
        .iter()
        .map(|&d| {
            let rec = beacon_features(&series.beacons, d, offset_minutes, rssi_cutoff);
            beacon_cols
                .iter()
                .map(|c| rec.get(c).copied().flatten())
                .collect()
        })
        .collect();
    let beacon = DailyTable {
        days: bdays,
        values: bvalues,
    };

    let mut regularity = FeatureRecord::new();
    for sig in crate::ingest::HEART_SIGNALS {
        let ts = match sig {
            "heart_rate" => series.heart_rate.as_ref(),
            _ => series.stress.as_ref(),
        };
        match ts.map(|t| regularity_features(t, 0, offset_minutes)) {
            Some(Ok(rec)) => regularity.extend(rec),
            _ => regularity.extend(regularity_names(sig).into_iter().map(|n| (n, None))),
        }
    }
    ParticipantDerived {
        participant: participant.clone(),
        summaries,
        beacon,
        regularity,
    }
}
