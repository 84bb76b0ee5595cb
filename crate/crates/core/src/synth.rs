//! Seeded synthetic cohort with planted construct signal.
//!
//! Every construct has its own standard-normal latent. Static features load
//! sparsely on those latents, heart and stress series switch between
//! regimes whose persistence (but not occupancy) depends on a latent, and
//! office-beacon sightings trace latent-dependent work hours. Ground truth
//! is a noisy linear map of each latent with the configured signal-to-noise
//! ratio, clamped to the construct range.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{derive_seed, ConstructId, ConstructRegistry, ModalityKind};
use crate::error::{Error, Result};
use crate::ingest::{
    self, FeatureMatrix, GroundTruthTable, ParticipantId, RangeRules, TimeSeries, Universe,
};

const N_CONSTRUCTS: usize = 19;

/// Latent driving heart-rate regime persistence.
pub const HEART_DRIVER: ConstructId = ConstructId::PhysicalActivity;
/// Latent driving stress regime persistence.
pub const STRESS_DRIVER: ConstructId = ConstructId::Anxiety;
/// Latent driving daily work hours.
pub const WORK_DRIVER: ConstructId = ConstructId::Ocb;
/// Latent driving the number of daily breaks (negatively).
pub const BREAK_DRIVER: ConstructId = ConstructId::Conscientiousness;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub n_participants: usize,
    /// Construct latents (19) plus shared nuisance factors.
    pub latent_dim: usize,
    /// Signal-to-noise ratio applied to every construct without an override.
    pub snr: f64,
    /// Construct name → SNR.
    pub snr_overrides: BTreeMap<String, f64>,
    pub feature_missing_rate: f64,
    pub modality_missing_rate: f64,
    pub days: usize,
    pub sample_minutes: u32,
    pub wearable_features: usize,
    pub phone_features: usize,
    pub social_features: usize,
    /// Features per construct in each static modality.
    pub features_per_construct: usize,
    /// Loading of a planted feature on its construct latent.
    pub loading: f64,
    /// Share of job-performance latent variance explained by the
    /// personality and cognitive latents.
    pub theory_share: f64,
    pub regimes: usize,
    /// Emit the static modalities only, no series.
    pub static_only: bool,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_participants: 200,
            latent_dim: N_CONSTRUCTS + 2,
            snr: 2.0,
            snr_overrides: BTreeMap::new(),
            feature_missing_rate: 0.05,
            modality_missing_rate: 0.05,
            days: 7,
            sample_minutes: 30,
            wearable_features: 40,
            phone_features: 40,
            social_features: 120,
            features_per_construct: 2,
            loading: 1.0,
            theory_share: 0.0,
            regimes: 3,
            static_only: false,
            seed: 0,
        }
    }
}

fn bad(field: &str, reason: &str) -> Error {
    Error::config(field, reason)
}

impl CohortSpec {
    pub fn from_toml_str(text: &str) -> Result<CohortSpec> {
        let s: CohortSpec = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CohortSpec> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        CohortSpec::from_toml_str(&text)
    }

    pub fn snr_for(&self, c: ConstructId) -> f64 {
        self.snr_overrides.get(c.name()).copied().unwrap_or(self.snr)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_participants < 10 {
            return Err(bad("n_participants", "must be at least 10"));
        }
        if self.latent_dim < N_CONSTRUCTS {
            return Err(bad("latent_dim", "must be at least 19"));
        }
        for (name, r) in [
            ("feature_missing_rate", self.feature_missing_rate),
            ("modality_missing_rate", self.modality_missing_rate),
            ("theory_share", self.theory_share),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(bad(name, "must lie in [0, 1]"));
            }
        }
        if !(self.snr >= 0.0) {
            return Err(bad("snr", "must be non-negative"));
        }
        for (name, &v) in &self.snr_overrides {
            name.parse::<ConstructId>()?;
            if !(v >= 0.0) {
                return Err(bad("snr_overrides", "must be non-negative"));
            }
        }
        if self.days < 2 || self.sample_minutes == 0 {
            return Err(bad("days", "need at least 2 days and a positive sampling period"));
        }
        if !(2..=4).contains(&self.regimes) {
            return Err(bad("regimes", "must be 2, 3 or 4"));
        }
        let planted = N_CONSTRUCTS * self.features_per_construct;
        if self.wearable_features < planted.min(N_CONSTRUCTS) || self.phone_features == 0 || self.social_features == 0 {
            return Err(bad("features", "too few static features"));
        }
        Ok(())
    }
}

/// Generated cohort: static tables, raw series and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub blocks: Vec<FeatureMatrix>,
    pub series: Vec<TimeSeries>,
    pub ground_truth: GroundTruthTable,
    /// Participant × latent (first 19 are the construct latents).
    pub latents: Vec<Vec<f64>>,
    /// Participant → true regime sequence per signal (heart, stress).
    pub regimes: Vec<[Vec<u8>; 2]>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Sparse loadings: each construct lands on `per` distinct features with
/// random sign; nuisance latents load weakly everywhere.
fn loadings(p: usize, spec: &CohortSpec, per: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut l = vec![vec![0.0; spec.latent_dim]; p];
    let mut slots: Vec<usize> = (0..p).collect();
    for c in 0..N_CONSTRUCTS {
        for k in 0..per {
            // cycle through a shuffled feature order so constructs rarely share
            if (c * per + k) % p == 0 {
                rand::seq::SliceRandom::shuffle(slots.as_mut_slice(), rng);
            }
            let j = slots[(c * per + k) % p];
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            l[j][c] = sign * spec.loading;
        }
    }
    for row in l.iter_mut() {
        for v in row.iter_mut().skip(N_CONSTRUCTS) {
            *v = 0.3 * normal(rng);
        }
    }
    l
}

fn static_block(
    modality: ModalityKind,
    prefix: &str,
    p: usize,
    per: usize,
    spec: &CohortSpec,
    latents: &[Vec<f64>],
    ids: &[ParticipantId],
    present: &[bool],
    seed: u64,
) -> Result<FeatureMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = loadings(p, spec, per, &mut rng);
    let scales: Vec<(f64, f64)> = (0..p)
        .map(|_| (rng.random_range(1.0..10.0), rng.random_range(20.0..100.0)))
        .collect();
    let mut columns: Vec<String> = (0..p).map(|j| format!("{prefix}_f{j:03}")).collect();
    if modality == ModalityKind::Wearable {
        columns[0] = "sleep_minutes".into();
    }
    let mut cells = Vec::with_capacity(ids.len() * p);
    for (i, z) in latents.iter().enumerate() {
        for j in 0..p {
            let signal: f64 = l[j].iter().zip(z).map(|(a, b)| a * b).sum();
            let raw = signal + normal(&mut rng);
            let mut v = if modality == ModalityKind::Wearable && j == 0 {
                // device glitches report sleep in seconds now and then
                let minutes = (420.0 + 45.0 * raw).clamp(0.0, 1440.0);
                if rng.random_bool(0.005) {
                    minutes * 60.0
                } else {
                    minutes
                }
            } else {
                scales[j].1 + scales[j].0 * raw
            };
            let keep = present[i] && !rng.random_bool(spec.feature_missing_rate);
            if !keep {
                v = f64::NAN;
            }
            cells.push(v.is_finite().then_some(v));
        }
    }
    FeatureMatrix::new(modality, columns, ids.to_vec(), cells)
}

/// Doubly stochastic transition matrix: stay with probability `rho`,
/// otherwise move uniformly, so every regime is equally occupied.
fn regime_path(len: usize, regimes: usize, rho: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut s = rng.random_range(0..regimes);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(s as u8);
        if !rng.random_bool(rho) {
            s = rng.random_range(0..regimes);
        }
    }
    out
}

fn persistence(z: f64) -> f64 {
    0.5 + 0.35 * z.tanh()
}

const EPOCH_START: i64 = 1_704_067_200; // 2024-01-01T00:00:00Z

fn start() -> DateTime<Utc> {
    Utc.timestamp_opt(EPOCH_START, 0).single().expect("valid epoch")
}

fn level(regimes: usize, lo: f64, hi: f64, s: u8) -> f64 {
    lo + (hi - lo) * s as f64 / (regimes - 1) as f64
}

fn beacon_series(
    id: &ParticipantId,
    z: &[f64],
    days: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TimeSeries>> {
    let rssi = Normal::new(-60.0, 6.0).expect("valid normal");
    let mut office = Vec::new();
    let mut home = Vec::new();
    let hours = (8.0 + 1.2 * z[WORK_DRIVER.index()]).clamp(4.0, 11.5);
    let n_breaks = (2.0 - z[BREAK_DRIVER.index()]).round().clamp(0.0, 5.0) as usize;
    for d in 0..days {
        let day0 = start() + Duration::days(d as i64);
        let arrive = 9.0 * 60.0 + 15.0 * normal(rng);
        let leave = arrive + hours * 60.0 + 10.0 * normal(rng);
        let breaks: Vec<(f64, f64)> = (0..n_breaks)
            .map(|_| {
                let b = rng.random_range(arrive + 30.0..(leave - 60.0).max(arrive + 31.0));
                (b, b + rng.random_range(8.0..45.0))
            })
            .collect();
        let mut t = arrive;
        while t < leave {
            if !breaks.iter().any(|(a, b)| t >= *a && t < *b) {
                let ts = day0 + Duration::seconds((t * 60.0) as i64);
                office.push((ts, rssi.sample(rng)));
            }
            t += 5.0;
        }
        let mut h = 20.0 * 60.0;
        while h < 23.5 * 60.0 {
            let ts = day0 + Duration::seconds((h * 60.0 + rng.random_range(0.0..60.0)) as i64);
            home.push((ts, -65.0 + 4.0 * normal(rng)));
            h += 30.0;
        }
    }
    Ok(vec![
        TimeSeries::from_points(id.clone(), "office", office)?,
        TimeSeries::from_points(id.clone(), "home", home)?,
    ])
}

/// Generate a cohort. Pure function of the spec (seed included).
pub fn generate(spec: &CohortSpec) -> Result<SynthCohort> {
    spec.validate()?;
    let n = spec.n_participants;
    let seed = spec.seed;
    let ids: Vec<ParticipantId> = (0..n).map(|i| ParticipantId::new(format!("P{:04}", i + 1))).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let mut latents: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..spec.latent_dim).map(|_| normal(&mut rng)).collect())
        .collect();
    if spec.theory_share > 0.0 {
        let theory: Vec<usize> = ConstructId::ALL
            .iter()
            .filter(|c| c.is_theory_predictor())
            .map(|c| c.index())
            .collect();
        let s = spec.theory_share;
        for z in latents.iter_mut() {
            let composite = theory.iter().map(|&t| z[t]).sum::<f64>() / (theory.len() as f64).sqrt();
            for c in ConstructId::ALL.iter().filter(|c| c.is_job_performance()) {
                z[c.index()] = s.sqrt() * composite + (1.0 - s).sqrt() * z[c.index()];
            }
        }
    }

    // ground truth
    let registry = ConstructRegistry::default();
    let mut gt_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
    let values: Vec<[Option<f64>; 19]> = latents
        .iter()
        .map(|z| {
            let mut row = [None; 19];
            for c in registry.iter() {
                let snr = spec.snr_for(c.id);
                let y = (snr / (1.0 + snr)).sqrt() * z[c.id.index()]
                    + (1.0 / (1.0 + snr)).sqrt() * normal(&mut gt_rng);
                let mid = (c.lo + c.hi) / 2.0;
                let v = mid + (c.hi - c.lo) / 6.0 * y;
                row[c.id.index()] = Some(v.clamp(c.lo, c.hi));
            }
            row
        })
        .collect();
    let ground_truth = GroundTruthTable::new(ids.clone(), values, &registry)?;

    // modality presence
    let mut miss_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3]));
    let mut present = |_: usize| -> Vec<bool> {
        (0..n)
            .map(|_| !miss_rng.random_bool(spec.modality_missing_rate))
            .collect()
    };
    let wear_present = present(0);
    let phone_present = present(1);
    let social_present = present(2);
    let heart_present = present(3);
    let beacon_present = present(4);

    let per = spec.features_per_construct;
    let blocks = vec![
        static_block(
            ModalityKind::Wearable,
            "wear",
            spec.wearable_features,
            per,
            spec,
            &latents,
            &ids,
            &wear_present,
            derive_seed(seed, &[10]),
        )?,
        static_block(
            ModalityKind::PhoneAgent,
            "phone",
            spec.phone_features,
            per,
            spec,
            &latents,
            &ids,
            &phone_present,
            derive_seed(seed, &[11]),
        )?,
        static_block(
            ModalityKind::SocialMedia,
            "social",
            spec.social_features,
            2 * per,
            spec,
            &latents,
            &ids,
            &social_present,
            derive_seed(seed, &[12]),
        )?,
    ];

    let mut series = Vec::new();
    let mut regimes = Vec::with_capacity(n);
    let slots = spec.days * 24 * 60 / spec.sample_minutes as usize;
    for (i, z) in latents.iter().enumerate() {
        let mut r = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[20, i as u64]));
        let heart = regime_path(slots, spec.regimes, persistence(z[HEART_DRIVER.index()]), &mut r);
        let stress = regime_path(slots, spec.regimes, persistence(z[STRESS_DRIVER.index()]), &mut r);
        if !spec.static_only && heart_present[i] {
            let step = |k: usize| start() + Duration::minutes(k as i64 * spec.sample_minutes as i64);
            let hr: Vec<(DateTime<Utc>, f64)> = heart
                .iter()
                .enumerate()
                .map(|(k, &s)| (step(k), level(spec.regimes, 62.0, 98.0, s) + 4.0 * normal(&mut r)))
                .collect();
            let st: Vec<(DateTime<Utc>, f64)> = stress
                .iter()
                .enumerate()
                .map(|(k, &s)| {
                    let v = level(spec.regimes, 15.0, 75.0, s) + 6.0 * normal(&mut r);
                    (step(k), v.clamp(0.0, 100.0))
                })
                .collect();
            series.push(TimeSeries::from_points(ids[i].clone(), "heart_rate", hr)?);
            series.push(TimeSeries::from_points(ids[i].clone(), "stress", st)?);
        }
        if !spec.static_only && beacon_present[i] {
            series.extend(beacon_series(&ids[i], z, spec.days, &mut r)?);
        }
        regimes.push([heart, stress]);
    }

    Ok(SynthCohort {
        blocks,
        series,
        ground_truth,
        latents,
        regimes,
    })
}

impl SynthCohort {
    pub fn universe(&self, rules: &RangeRules) -> Result<Universe> {
        Universe::assemble(
            self.blocks.clone(),
            self.series.clone(),
            Some(self.ground_truth.clone()),
            rules,
        )
    }

    /// Write the ingest CSV files into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let path = dir.join(name);
            std::fs::File::create(&path)
                .map(std::io::BufWriter::new)
                .map_err(|e| Error::io(&path, e))
        };
        for b in &self.blocks {
            let name = match b.modality {
                ModalityKind::Wearable => ingest::WEARABLE_FILE,
                ModalityKind::PhoneAgent => ingest::PHONE_FILE,
                _ => ingest::SOCIAL_FILE,
            };
            ingest::write_matrix(create(name)?, b)?;
        }
        let heart: Vec<&TimeSeries> = self
            .series
            .iter()
            .filter(|s| ingest::HEART_SIGNALS.contains(&s.signal.as_str()))
            .collect();
        let beacons: Vec<&TimeSeries> = self
            .series
            .iter()
            .filter(|s| ingest::BEACON_NAMES.contains(&s.signal.as_str()))
            .collect();
        if !heart.is_empty() {
            ingest::write_series(create(ingest::HEART_FILE)?, &ingest::HEART_SIGNALS, &heart)?;
        }
        if !beacons.is_empty() {
            ingest::write_series(create(ingest::BEACON_FILE)?, &ingest::BEACON_NAMES, &beacons)?;
        }
        ingest::write_ground_truth(create(ingest::GROUND_TRUTH_FILE)?, &self.ground_truth)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::kendall_tau;
    use crate::hon::{build_hon, DiscreteSeries};

    fn small(seed: u64) -> CohortSpec {
        CohortSpec {
            n_participants: 60,
            days: 3,
            seed,
            ..CohortSpec::default()
        }
    }

    #[test]
    fn same_seed_same_cohort() {
        assert_eq!(generate(&small(3)).unwrap(), generate(&small(3)).unwrap());
        assert_ne!(generate(&small(3)).unwrap().ground_truth, generate(&small(4)).unwrap().ground_truth);
    }

    #[test]
    fn zero_rates_give_complete_tables() {
        let spec = CohortSpec {
            feature_missing_rate: 0.0,
            modality_missing_rate: 0.0,
            ..small(1)
        };
        let c = generate(&spec).unwrap();
        assert!(c.blocks.iter().all(|b| b.missing_count() == 0));
        assert_eq!(c.series.len(), 60 * 4);
    }

    #[test]
    fn missing_rates_match_spec() {
        let spec = CohortSpec {
            n_participants: 400,
            feature_missing_rate: 0.1,
            modality_missing_rate: 0.2,
            static_only: true,
            ..CohortSpec::default()
        };
        let c = generate(&spec).unwrap();
        for b in &c.blocks {
            let rows_missing = (0..b.n_rows()).filter(|&r| b.row_all_missing(r)).count();
            let modality_rate = rows_missing as f64 / b.n_rows() as f64;
            assert!((modality_rate - 0.2).abs() < 0.05, "{modality_rate}");
            let present_cells = (b.n_rows() - rows_missing) * b.n_cols();
            let cell_missing = b.missing_count() - rows_missing * b.n_cols();
            let cell_rate = cell_missing as f64 / present_cells as f64;
            assert!((cell_rate - 0.1).abs() < 0.02, "{cell_rate}");
        }
    }

    #[test]
    fn ground_truth_respects_ranges() {
        let c = generate(&CohortSpec { snr: 50.0, ..small(2) }).unwrap();
        let reg = ConstructRegistry::default();
        for i in 0..60 {
            for con in reg.iter() {
                let v = c.ground_truth.row(i)[con.id.index()].unwrap();
                assert!(v >= con.lo && v <= con.hi);
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate(&CohortSpec { n_participants: 5, ..small(0) }).is_err());
        assert!(generate(&CohortSpec { feature_missing_rate: 1.5, ..small(0) }).is_err());
        assert!(generate(&CohortSpec { snr: -1.0, ..small(0) }).is_err());
    }

    /// Order-1 self-transition mass on the true regimes tracks the driving
    /// latent far better than the series mean does.
    #[test]
    fn regime_persistence_carries_the_signal() {
        let spec = CohortSpec {
            n_participants: 200,
            modality_missing_rate: 0.0,
            ..CohortSpec::default()
        };
        let c = generate(&spec).unwrap();
        let z: Vec<f64> = c.latents.iter().map(|l| l[HEART_DRIVER.index()]).collect();
        let hon_stat: Vec<f64> = c
            .regimes
            .iter()
            .map(|r| {
                let ds = DiscreteSeries {
                    participant: "p".into(),
                    slot_minutes: 30,
                    segments: vec![r[0].clone()],
                };
                let m = build_hon(&ds, 1).unwrap();
                (0..spec.regimes as u8)
                    .filter_map(|s| m.probability(&[s], s))
                    .sum::<f64>()
            })
            .collect();
        let mean_stat: Vec<f64> = c
            .series
            .iter()
            .filter(|s| s.signal == "heart_rate")
            .map(|s| s.points.iter().map(|p| p.1).sum::<f64>() / s.len() as f64)
            .collect();
        let t_hon = kendall_tau(&hon_stat, &z).unwrap();
        let t_mean = kendall_tau(&mean_stat, &z).unwrap();
        assert!(t_hon > 0.4, "{t_hon}");
        assert!(t_hon > t_mean.abs() + 0.2, "{t_hon} vs {t_mean}");
    }

    #[test]
    fn csv_output_round_trips_through_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&small(5)).unwrap();
        c.write_dir(dir.path()).unwrap();
        let reg = ConstructRegistry::default();
        let rules = RangeRules::new(BTreeMap::new());
        let u = Universe::load_dir(dir.path(), &reg, &rules, true).unwrap();
        let direct = c.universe(&rules).unwrap();
        assert_eq!(u.participants, direct.participants);
        assert_eq!(u.ground_truth, direct.ground_truth);
        assert_eq!(u.static_blocks, direct.static_blocks);
        assert_eq!(u.series, direct.series);
    }
}
