//! CSV ingest: modality tables, time series and ground truth, plus
//! plausibility screening and assembly of the participant universe.
//!
//! Missing cells are empty on disk (`NA` is accepted on read) and
//! `None` in memory. Floats are written with Rust's shortest round-trip
//! formatting so a written table re-reads bit-identically.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::domain::{ConstructId, ConstructRegistry, ModalityKind};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParticipantId(pub String);

impl ParticipantId {
    pub fn new(s: impl Into<String>) -> Self {
        ParticipantId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ParticipantId {
    fn from(s: &str) -> Self {
        ParticipantId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub participant: ParticipantId,
    pub signal: String,
    /// Strictly increasing timestamps, finite values.
    pub points: Vec<(DateTime<Utc>, f64)>,
}

impl TimeSeries {
    pub fn new(participant: ParticipantId, signal: impl Into<String>) -> Self {
        TimeSeries {
            participant,
            signal: signal.into(),
            points: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Build from unordered points: sorts, rejects duplicate timestamps and
    /// non-finite values.
    pub fn from_points(
        participant: ParticipantId,
        signal: impl Into<String>,
        mut points: Vec<(DateTime<Utc>, f64)>,
    ) -> Result<Self> {
        let signal = signal.into();
        if let Some(&(_, v)) = points.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteValue(v));
        }
        points.sort_by_key(|&(t, _)| t);
        if let Some(w) = points.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::DuplicateTimestamp {
                participant: participant.0.clone(),
                timestamp: format_timestamp(w[0].0),
            });
        }
        Ok(TimeSeries {
            participant,
            signal,
            points,
        })
    }
}

/// Participants × named features for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub modality: ModalityKind,
    columns: Vec<String>,
    participants: Vec<ParticipantId>,
    cells: Vec<Option<f64>>,
}

impl FeatureMatrix {
    pub fn new(
        modality: ModalityKind,
        columns: Vec<String>,
        participants: Vec<ParticipantId>,
        cells: Vec<Option<f64>>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for c in &columns {
            if !seen.insert(c.as_str()) {
                return Err(Error::SchemaError {
                    column: c.clone(),
                    reason: "duplicate column".into(),
                });
            }
        }
        let mut seen = BTreeSet::new();
        for p in &participants {
            if !seen.insert(p) {
                return Err(Error::SchemaError {
                    column: "participant_id".into(),
                    reason: format!("duplicate participant `{p}`"),
                });
            }
        }
        if cells.len() != columns.len() * participants.len() {
            return Err(Error::SchemaError {
                column: "*".into(),
                reason: format!(
                    "{} cells for {}x{} matrix",
                    cells.len(),
                    participants.len(),
                    columns.len()
                ),
            });
        }
        if let Some(v) = cells.iter().flatten().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(*v));
        }
        Ok(FeatureMatrix {
            modality,
            columns,
            participants,
            cells,
        })
    }

    pub fn empty(modality: ModalityKind, participants: Vec<ParticipantId>) -> Self {
        FeatureMatrix {
            modality,
            columns: Vec::new(),
            participants,
            cells: Vec::new(),
        }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn participants(&self) -> &[ParticipantId] {
        &self.participants
    }

    pub fn n_rows(&self) -> usize {
        self.participants.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.cells[row * self.columns.len() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: Option<f64>) {
        let n = self.columns.len();
        self.cells[row * n + col] = value;
    }

    pub fn row(&self, row: usize) -> &[Option<f64>] {
        let n = self.columns.len();
        &self.cells[row * n..(row + 1) * n]
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = Option<f64>> + '_ {
        (0..self.n_rows()).map(move |r| self.get(r, col))
    }

    pub fn row_index(&self, p: &ParticipantId) -> Option<usize> {
        self.participants.iter().position(|q| q == p)
    }

    pub fn missing_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_none()).count()
    }

    /// True when every cell of the row is missing (full-modality gap).
    pub fn row_all_missing(&self, row: usize) -> bool {
        self.row(row).iter().all(Option::is_none)
    }

    /// Rows for `ids` in the given order; participants absent from this
    /// matrix come back as all-missing rows.
    pub fn select_rows(&self, ids: &[ParticipantId]) -> FeatureMatrix {
        let index: BTreeMap<&ParticipantId, usize> = self
            .participants
            .iter()
            .enumerate()
            .map(|(i, p)| (p, i))
            .collect();
        let n = self.n_cols();
        let mut cells = Vec::with_capacity(ids.len() * n);
        for p in ids {
            match index.get(p) {
                Some(&r) => cells.extend_from_slice(self.row(r)),
                None => cells.extend(std::iter::repeat_n(None, n)),
            }
        }
        FeatureMatrix {
            modality: self.modality,
            columns: self.columns.clone(),
            participants: ids.to_vec(),
            cells,
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> FeatureMatrix {
        let mut cells = Vec::with_capacity(self.n_rows() * cols.len());
        for r in 0..self.n_rows() {
            cells.extend(cols.iter().map(|&c| self.get(r, c)));
        }
        FeatureMatrix {
            modality: self.modality,
            columns: cols.iter().map(|&c| self.columns[c].clone()).collect(),
            participants: self.participants.clone(),
            cells,
        }
    }

    /// Append the columns of `other` (same participant order).
    pub fn hstack(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.participants != other.participants {
            return Err(Error::SchemaMismatch("participant order differs".into()));
        }
        let mut columns = self.columns.clone();
        columns.extend(other.columns.iter().cloned());
        let mut cells = Vec::with_capacity(self.cells.len() + other.cells.len());
        for r in 0..self.n_rows() {
            cells.extend_from_slice(self.row(r));
            cells.extend_from_slice(other.row(r));
        }
        FeatureMatrix::new(self.modality, columns, self.participants.clone(), cells)
    }

    pub fn with_modality(mut self, modality: ModalityKind) -> Self {
        self.modality = modality;
        self
    }
}

/// Participant → per-construct value or missing.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthTable {
    participants: Vec<ParticipantId>,
    values: Vec<[Option<f64>; 19]>,
}

impl GroundTruthTable {
    pub fn new(
        participants: Vec<ParticipantId>,
        values: Vec<[Option<f64>; 19]>,
        registry: &ConstructRegistry,
    ) -> Result<Self> {
        if participants.len() != values.len() {
            return Err(Error::LengthMismatch(participants.len(), values.len()));
        }
        for (p, row) in participants.iter().zip(&values) {
            for c in registry.iter() {
                if let Some(v) = row[c.id.index()] {
                    if !(v.is_finite() && v >= c.lo && v <= c.hi) {
                        return Err(Error::SchemaError {
                            column: c.id.name().into(),
                            reason: format!("{p}: value {v} outside [{}, {}]", c.lo, c.hi),
                        });
                    }
                }
            }
        }
        Ok(GroundTruthTable {
            participants,
            values,
        })
    }

    pub fn participants(&self) -> &[ParticipantId] {
        &self.participants
    }

    pub fn get(&self, p: &ParticipantId, c: ConstructId) -> Option<f64> {
        let row = self.participants.iter().position(|q| q == p)?;
        self.values[row][c.index()]
    }

    pub fn row(&self, i: usize) -> &[Option<f64>; 19] {
        &self.values[i]
    }

    pub fn set(&mut self, p: &ParticipantId, c: ConstructId, v: Option<f64>) {
        if let Some(row) = self.participants.iter().position(|q| q == p) {
            self.values[row][c.index()] = v;
        }
    }

    /// Values for `ids` in order; unknown participants give missing.
    pub fn column_for(&self, ids: &[ParticipantId], c: ConstructId) -> Vec<Option<f64>> {
        let index: BTreeMap<&ParticipantId, usize> = self
            .participants
            .iter()
            .enumerate()
            .map(|(i, p)| (p, i))
            .collect();
        ids.iter()
            .map(|p| index.get(p).and_then(|&r| self.values[r][c.index()]))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Reading

pub fn parse_timestamp(s: &str) -> std::result::Result<DateTime<Utc>, String> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| e.to_string())
}

pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<Option<f64>> {
    let s = raw.trim();
    if s.is_empty() || s == "NA" {
        return Ok(None);
    }
    let v: f64 = s.parse().map_err(|_| Error::ParseError {
        row,
        column: column.to_string(),
        reason: format!("`{s}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::ParseError {
            row,
            column: column.to_string(),
            reason: "non-finite value".into(),
        });
    }
    Ok(Some(v))
}

fn format_cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:?}"),
        None => String::new(),
    }
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

/// Either a static participant table or a set of series.
#[derive(Debug, Clone)]
pub enum Loaded {
    Matrix(FeatureMatrix),
    Series(Vec<TimeSeries>),
}

pub fn load_modality(path: impl AsRef<Path>, modality: ModalityKind) -> Result<Loaded> {
    let path = path.as_ref();
    read_modality(open(path)?, modality)
}

pub fn read_modality<R: Read>(reader: R, modality: ModalityKind) -> Result<Loaded> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    match headers.first().map(String::as_str) {
        Some("participant_id") => {}
        other => {
            return Err(Error::SchemaError {
                column: other.unwrap_or("").into(),
                reason: "first column must be participant_id".into(),
            })
        }
    }
    if headers.get(1).map(String::as_str) == Some("timestamp") {
        read_series_records(rdr, &headers).map(Loaded::Series)
    } else {
        read_matrix_records(rdr, &headers, modality).map(Loaded::Matrix)
    }
}

fn read_matrix_records<R: Read>(
    mut rdr: csv::Reader<R>,
    headers: &[String],
    modality: ModalityKind,
) -> Result<FeatureMatrix> {
    let columns: Vec<String> = headers[1..].to_vec();
    let mut participants = Vec::new();
    let mut cells = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        if rec.len() != headers.len() {
            return Err(Error::ParseError {
                row,
                column: "*".into(),
                reason: format!("expected {} fields, got {}", headers.len(), rec.len()),
            });
        }
        participants.push(ParticipantId::new(rec[0].trim()));
        for (j, col) in columns.iter().enumerate() {
            cells.push(parse_cell(&rec[j + 1], row, col)?);
        }
    }
    FeatureMatrix::new(modality, columns, participants, cells)
}

fn read_series_records<R: Read>(
    mut rdr: csv::Reader<R>,
    headers: &[String],
) -> Result<Vec<TimeSeries>> {
    let signals = &headers[2..];
    if signals.is_empty() {
        return Err(Error::SchemaError {
            column: "timestamp".into(),
            reason: "series file has no signal columns".into(),
        });
    }
    let mut by_key: BTreeMap<(ParticipantId, usize), Vec<(DateTime<Utc>, f64)>> = BTreeMap::new();
    let mut stamps: BTreeSet<(ParticipantId, DateTime<Utc>)> = BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        if rec.len() != headers.len() {
            return Err(Error::ParseError {
                row,
                column: "*".into(),
                reason: format!("expected {} fields, got {}", headers.len(), rec.len()),
            });
        }
        let p = ParticipantId::new(rec[0].trim());
        let t = parse_timestamp(rec[1].trim()).map_err(|reason| Error::ParseError {
            row,
            column: "timestamp".into(),
            reason,
        })?;
        if !stamps.insert((p.clone(), t)) {
            return Err(Error::DuplicateTimestamp {
                participant: p.0,
                timestamp: format_timestamp(t),
            });
        }
        for (j, sig) in signals.iter().enumerate() {
            if let Some(v) = parse_cell(&rec[j + 2], row, sig)? {
                by_key.entry((p.clone(), j)).or_default().push((t, v));
            }
        }
    }
    by_key
        .into_iter()
        .map(|((p, j), pts)| TimeSeries::from_points(p, signals[j].clone(), pts))
        .collect()
}

pub fn load_ground_truth(
    path: impl AsRef<Path>,
    registry: &ConstructRegistry,
) -> Result<GroundTruthTable> {
    let path = path.as_ref();
    read_ground_truth(open(path)?, registry)
}

pub fn read_ground_truth<R: Read>(
    reader: R,
    registry: &ConstructRegistry,
) -> Result<GroundTruthTable> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.first().map(String::as_str) != Some("participant_id") {
        return Err(Error::SchemaError {
            column: headers.first().cloned().unwrap_or_default(),
            reason: "first column must be participant_id".into(),
        });
    }
    let mut ids = Vec::new();
    for h in &headers[1..] {
        let id: ConstructId = h.parse().map_err(|_| Error::SchemaError {
            column: h.clone(),
            reason: "unknown construct".into(),
        })?;
        if ids.contains(&id) {
            return Err(Error::SchemaError {
                column: h.clone(),
                reason: "duplicate construct column".into(),
            });
        }
        ids.push(id);
    }
    if let Some(missing) = ConstructId::ALL.iter().find(|c| !ids.contains(c)) {
        return Err(Error::SchemaError {
            column: missing.name().into(),
            reason: "construct column missing".into(),
        });
    }
    let mut participants = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        if rec.len() != headers.len() {
            return Err(Error::ParseError {
                row,
                column: "*".into(),
                reason: format!("expected {} fields, got {}", headers.len(), rec.len()),
            });
        }
        participants.push(ParticipantId::new(rec[0].trim()));
        let mut vals = [None; 19];
        for (j, id) in ids.iter().enumerate() {
            vals[id.index()] = parse_cell(&rec[j + 1], row, id.name())?;
        }
        values.push(vals);
    }
    GroundTruthTable::new(participants, values, registry)
}

// ---------------------------------------------------------------------------
// Writing (canonical form)

pub fn write_matrix<W: Write>(w: W, m: &FeatureMatrix) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["participant_id".to_string()];
    header.extend(m.columns.iter().cloned());
    wtr.write_record(&header)?;
    for r in 0..m.n_rows() {
        let mut rec = vec![m.participants[r].0.clone()];
        rec.extend(m.row(r).iter().map(|&v| format_cell(v)));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Write series that share a participant/timestamp grid into one file.
/// Signals are columns, in the order given.
pub fn write_series<W: Write>(w: W, signals: &[&str], series: &[&TimeSeries]) -> Result<()> {
    let mut rows: BTreeMap<(&ParticipantId, DateTime<Utc>), Vec<Option<f64>>> = BTreeMap::new();
    for ts in series {
        let j = signals
            .iter()
            .position(|s| *s == ts.signal)
            .ok_or_else(|| Error::SchemaError {
                column: ts.signal.clone(),
                reason: "signal not in header".into(),
            })?;
        for &(t, v) in &ts.points {
            rows.entry((&ts.participant, t))
                .or_insert_with(|| vec![None; signals.len()])[j] = Some(v);
        }
    }
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["participant_id".to_string(), "timestamp".to_string()];
    header.extend(signals.iter().map(|s| s.to_string()));
    wtr.write_record(&header)?;
    for ((p, t), vals) in rows {
        let mut rec = vec![p.0.clone(), format_timestamp(t)];
        rec.extend(vals.into_iter().map(format_cell));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn write_ground_truth<W: Write>(w: W, gt: &GroundTruthTable) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["participant_id".to_string()];
    header.extend(ConstructId::ALL.iter().map(|c| c.name().to_string()));
    wtr.write_record(&header)?;
    for (p, row) in gt.participants.iter().zip(&gt.values) {
        let mut rec = vec![p.0.clone()];
        rec.extend(row.iter().map(|&v| format_cell(v)));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Screening

/// Plausible `[lo, hi]` per signal. A rule named `x` also covers derived
/// columns named `x.<anything>`.
#[derive(Debug, Clone, Default)]
pub struct RangeRules {
    rules: BTreeMap<String, (f64, f64)>,
}

impl RangeRules {
    pub fn new(rules: BTreeMap<String, (f64, f64)>) -> Self {
        RangeRules { rules }
    }

    pub fn for_name(&self, name: &str) -> Option<(f64, f64)> {
        if let Some(&r) = self.rules.get(name) {
            return Some(r);
        }
        let base = name.split('.').next().unwrap_or(name);
        self.rules.get(base).copied()
    }

    fn check(&self, name: &str, v: f64) -> Option<String> {
        let (lo, hi) = self.for_name(name)?;
        if v > hi {
            Some(format!("{name} value {v} exceeds {hi}"))
        } else if v < lo {
            Some(format!("{name} value {v} below {lo}"))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reject {
    pub participant: ParticipantId,
    pub name: String,
    pub timestamp: Option<DateTime<Utc>>,
    pub value: f64,
    pub reason: String,
}

pub fn screen_series(ts: &TimeSeries, rules: &RangeRules) -> (TimeSeries, Vec<Reject>) {
    let mut clean = TimeSeries::new(ts.participant.clone(), ts.signal.clone());
    let mut rejects = Vec::new();
    for &(t, v) in &ts.points {
        match rules.check(&ts.signal, v) {
            Some(reason) => rejects.push(Reject {
                participant: ts.participant.clone(),
                name: ts.signal.clone(),
                timestamp: Some(t),
                value: v,
                reason,
            }),
            None => clean.points.push((t, v)),
        }
    }
    (clean, rejects)
}

/// Out-of-rule cells become missing and are reported as rejects.
pub fn screen_matrix(m: &FeatureMatrix, rules: &RangeRules) -> (FeatureMatrix, Vec<Reject>) {
    let mut clean = m.clone();
    let mut rejects = Vec::new();
    for c in 0..m.n_cols() {
        let name = &m.columns[c];
        if rules.for_name(name).is_none() {
            continue;
        }
        for r in 0..m.n_rows() {
            if let Some(v) = m.get(r, c) {
                if let Some(reason) = rules.check(name, v) {
                    clean.set(r, c, None);
                    rejects.push(Reject {
                        participant: m.participants[r].clone(),
                        name: name.clone(),
                        timestamp: None,
                        value: v,
                        reason,
                    });
                }
            }
        }
    }
    (clean, rejects)
}

// ---------------------------------------------------------------------------
// Universe

pub const WEARABLE_FILE: &str = "wearable.csv";
pub const PHONE_FILE: &str = "phone.csv";
pub const SOCIAL_FILE: &str = "social.csv";
pub const HEART_FILE: &str = "heart.csv";
pub const BEACON_FILE: &str = "beacon.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";

pub const HEART_SIGNALS: [&str; 2] = ["heart_rate", "stress"];
pub const BEACON_NAMES: [&str; 4] = ["office", "home", "keychain", "backpack"];

/// Heart-rate and stress series per participant.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SensorSeries {
    pub heart_rate: Option<TimeSeries>,
    pub stress: Option<TimeSeries>,
    /// Beacon name → RSSI sightings.
    pub beacons: BTreeMap<String, TimeSeries>,
}

/// Everything known about the cohort, frozen after assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct Universe {
    pub participants: Vec<ParticipantId>,
    pub static_blocks: BTreeMap<ModalityKind, FeatureMatrix>,
    pub series: BTreeMap<ParticipantId, SensorSeries>,
    pub ground_truth: Option<GroundTruthTable>,
    pub rejects: Vec<Reject>,
}

impl Universe {
    /// Assemble from in-memory parts, screening every value against `rules`.
    pub fn assemble(
        static_blocks: Vec<FeatureMatrix>,
        series: Vec<TimeSeries>,
        ground_truth: Option<GroundTruthTable>,
        rules: &RangeRules,
    ) -> Result<Universe> {
        let mut ids: BTreeSet<ParticipantId> = BTreeSet::new();
        let mut blocks = BTreeMap::new();
        let mut rejects = Vec::new();
        for m in static_blocks {
            ids.extend(m.participants.iter().cloned());
            let (clean, rej) = screen_matrix(&m, rules);
            rejects.extend(rej);
            if blocks.insert(m.modality, clean).is_some() {
                return Err(Error::SchemaError {
                    column: m.modality.name().into(),
                    reason: "modality loaded twice".into(),
                });
            }
        }
        let mut per: BTreeMap<ParticipantId, SensorSeries> = BTreeMap::new();
        for ts in series {
            ids.insert(ts.participant.clone());
            let (clean, rej) = screen_series(&ts, rules);
            rejects.extend(rej);
            let entry = per.entry(ts.participant.clone()).or_default();
            match clean.signal.as_str() {
                "heart_rate" => entry.heart_rate = Some(clean),
                "stress" => entry.stress = Some(clean),
                name if BEACON_NAMES.contains(&name) => {
                    entry.beacons.insert(name.to_string(), clean);
                }
                other => {
                    return Err(Error::SchemaError {
                        column: other.into(),
                        reason: "unknown series signal".into(),
                    })
                }
            }
        }
        if let Some(gt) = &ground_truth {
            ids.extend(gt.participants.iter().cloned());
        }
        Ok(Universe {
            participants: ids.into_iter().collect(),
            static_blocks: blocks,
            series: per,
            ground_truth,
            rejects,
        })
    }

    /// Load every known file present in `dir`. The ground-truth file is
    /// required when `require_ground_truth` is set.
    pub fn load_dir(
        dir: impl AsRef<Path>,
        registry: &ConstructRegistry,
        rules: &RangeRules,
        require_ground_truth: bool,
    ) -> Result<Universe> {
        let dir = dir.as_ref();
        let gt_path = dir.join(GROUND_TRUTH_FILE);
        let static_files = [
            (WEARABLE_FILE, ModalityKind::Wearable),
            (PHONE_FILE, ModalityKind::PhoneAgent),
            (SOCIAL_FILE, ModalityKind::SocialMedia),
            (HEART_FILE, ModalityKind::HeartRateDerived),
            (BEACON_FILE, ModalityKind::Beacon),
        ];
        let present: Vec<(PathBuf, ModalityKind)> = static_files
            .iter()
            .map(|(f, m)| (dir.join(f), *m))
            .filter(|(p, _)| p.exists())
            .collect();
        if present.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no modality files found in {}",
                dir.display()
            )));
        }
        let loaded = par::map(&present, |(p, m)| load_modality(p, *m));
        let mut blocks = Vec::new();
        let mut series = Vec::new();
        for l in loaded {
            match l? {
                Loaded::Matrix(m) => blocks.push(m),
                Loaded::Series(s) => series.extend(s),
            }
        }
        let gt = if gt_path.exists() {
            Some(load_ground_truth(&gt_path, registry)?)
        } else if require_ground_truth {
            return Err(Error::io(
                &gt_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "ground truth file missing"),
            ));
        } else {
            None
        };
        Universe::assemble(blocks, series, gt, rules)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn ts(h: u32, m: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 3, 1, h, m, 0).unwrap()
    }

    #[test]
    fn empty_cell_is_missing() {
        let csv = "participant_id,steps,sleep_minutes\np1,,400\np2,1200,NA\n";
        let Loaded::Matrix(m) = read_modality(csv.as_bytes(), ModalityKind::Wearable).unwrap()
        else {
            panic!("expected matrix")
        };
        assert_eq!(m.get(0, 0), None);
        assert_eq!(m.get(0, 1), Some(400.0));
        assert_eq!(m.get(1, 0), Some(1200.0));
        assert_eq!(m.get(1, 1), None);
    }

    #[test]
    fn unsorted_series_resorted_and_duplicates_rejected() {
        let csv = "participant_id,timestamp,heart_rate\n\
                   p1,2024-03-01T10:00:00Z,70\n\
                   p1,2024-03-01T09:00:00Z,65\n\
                   p1,2024-03-01T11:00:00Z,80\n";
        let Loaded::Series(s) = read_modality(csv.as_bytes(), ModalityKind::HeartRateDerived)
            .unwrap()
        else {
            panic!("expected series")
        };
        let mut oracle = vec![(ts(10, 0), 70.0), (ts(9, 0), 65.0), (ts(11, 0), 80.0)];
        oracle.sort_by_key(|p| p.0);
        assert_eq!(s[0].points, oracle);

        let dup = "participant_id,timestamp,heart_rate\n\
                   p1,2024-03-01T10:00:00Z,70\n\
                   p1,2024-03-01T10:00:00Z,71\n";
        assert!(matches!(
            read_modality(dup.as_bytes(), ModalityKind::HeartRateDerived),
            Err(Error::DuplicateTimestamp { .. })
        ));
    }

    #[test]
    fn ground_truth_schema_checks() {
        let reg = ConstructRegistry::default();
        let mut header = "participant_id".to_string();
        for c in ConstructId::ALL {
            header.push(',');
            header.push_str(c.name());
        }
        let ok = format!("{header}\np1{}\n", ",".repeat(19));
        let gt = read_ground_truth(ok.as_bytes(), &reg).unwrap();
        assert_eq!(gt.get(&"p1".into(), ConstructId::Irb), None);

        let bad = format!("{header},Happiness\np1{}\n", ",".repeat(20));
        assert!(matches!(
            read_ground_truth(bad.as_bytes(), &reg),
            Err(Error::SchemaError { column, .. }) if column == "Happiness"
        ));
    }

    #[test]
    fn parse_error_names_row_and_column() {
        let csv = "participant_id,steps\np1,12\np2,abc\n";
        match read_modality(csv.as_bytes(), ModalityKind::Wearable) {
            Err(Error::ParseError { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "steps");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn screening_cited_error_classes() {
        let rules = RangeRules::new(crate::domain::default_screening_rules());
        let m = FeatureMatrix::new(
            ModalityKind::Wearable,
            vec!["sleep_minutes".into(), "commute_minutes".into()],
            vec!["p1".into(), "p2".into()],
            vec![Some(60000.0), Some(-12.0), Some(420.0), Some(30.0)],
        )
        .unwrap();
        let (clean, rejects) = screen_matrix(&m, &rules);
        assert_eq!(rejects.len(), 2);
        assert!(rejects[0].reason.contains("exceeds 1440"));
        assert!(rejects[1].reason.contains("below 0"));
        assert_eq!(clean.get(0, 0), None);
        assert_eq!(clean.get(1, 0), Some(420.0));
    }

    #[test]
    fn screening_noop_and_lossless() {
        let rules = RangeRules::new(crate::domain::default_screening_rules());
        let s = TimeSeries::from_points(
            "p1".into(),
            "heart_rate",
            vec![(ts(1, 0), 60.0), (ts(2, 0), 300.0), (ts(3, 0), 20.0), (ts(4, 0), 90.0)],
        )
        .unwrap();
        let (clean, rejects) = screen_series(&s, &rules);
        assert_eq!(clean.len() + rejects.len(), s.len());
        assert_eq!(clean.points, vec![(ts(1, 0), 60.0), (ts(4, 0), 90.0)]);

        let ok = TimeSeries::from_points("p1".into(), "heart_rate", vec![(ts(1, 0), 60.0)]).unwrap();
        let (clean, rejects) = screen_series(&ok, &rules);
        assert!(rejects.is_empty());
        assert_eq!(clean, ok);
    }

    #[test]
    fn derived_column_names_inherit_rules() {
        let rules = RangeRules::new(crate::domain::default_screening_rules());
        assert_eq!(rules.for_name("heart_rate.Day.mean"), Some((25.0, 250.0)));
        assert_eq!(rules.for_name("steps"), None);
    }
}
