//! Domain types shared by every stage: constructs and their ranges,
//! modalities, pipeline configuration and range post-processing.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::impute::Strategy;
use crate::models::CandidateSpec;
use crate::reduce::CorrMethod;

macro_rules! constructs {
    ($($variant:ident => $name:literal, [$lo:expr, $hi:expr];)*) => {
        /// The 19 ground-truth targets.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum ConstructId {
            $($variant,)*
        }

        impl ConstructId {
            pub const ALL: [ConstructId; 19] = [$(ConstructId::$variant,)*];

            pub fn name(self) -> &'static str {
                match self {
                    $(ConstructId::$variant => $name,)*
                }
            }

            /// Default instrument range `[lo, hi]`.
            pub fn default_range(self) -> (f64, f64) {
                match self {
                    $(ConstructId::$variant => ($lo as f64, $hi as f64),)*
                }
            }
        }
    };
}

// Item counts times item scale for summed instruments, item scale for
// averaged ones (BFI-2).
constructs! {
    Irb => "IRB", [7, 49];
    Itp => "ITP", [3, 15];
    Ocb => "OCB", [20, 100];
    InterpersonalDeviance => "InterpersonalDeviance", [7, 49];
    OrganizationalDeviance => "OrganizationalDeviance", [12, 84];
    Abstraction => "Abstraction", [0, 25];
    Vocabulary => "Vocabulary", [0, 40];
    Extraversion => "Extraversion", [1, 5];
    Agreeableness => "Agreeableness", [1, 5];
    Conscientiousness => "Conscientiousness", [1, 5];
    Neuroticism => "Neuroticism", [1, 5];
    Openness => "Openness", [1, 5];
    PositiveAffect => "PositiveAffect", [10, 50];
    NegativeAffect => "NegativeAffect", [10, 50];
    Anxiety => "Anxiety", [20, 80];
    Alcohol => "Alcohol", [0, 40];
    Tobacco => "Tobacco", [0, 10];
    PhysicalActivity => "PhysicalActivity", [0, 20000];
    Sleep => "Sleep", [0, 21];
}

impl ConstructId {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_job_performance(self) -> bool {
        matches!(
            self,
            ConstructId::Irb
                | ConstructId::Itp
                | ConstructId::Ocb
                | ConstructId::InterpersonalDeviance
                | ConstructId::OrganizationalDeviance
        )
    }

    /// Personality and cognitive-ability constructs, the established
    /// predictors of job performance.
    pub fn is_theory_predictor(self) -> bool {
        matches!(
            self,
            ConstructId::Abstraction
                | ConstructId::Vocabulary
                | ConstructId::Extraversion
                | ConstructId::Agreeableness
                | ConstructId::Conscientiousness
                | ConstructId::Neuroticism
                | ConstructId::Openness
        )
    }
}

impl fmt::Display for ConstructId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConstructId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConstructId::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownConstruct(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Construct {
    pub id: ConstructId,
    pub lo: f64,
    pub hi: f64,
    pub kind: TaskKind,
}

impl Construct {
    /// Clamp a prediction into the construct's prescribed range.
    pub fn clamp(&self, value: f64) -> Result<f64> {
        clamp_to_range(self, value)
    }
}

pub fn clamp_to_range(construct: &Construct, value: f64) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::NonFiniteValue(value));
    }
    Ok(value.max(construct.lo).min(construct.hi))
}

/// All 19 constructs, indexed by [`ConstructId::index`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructRegistry {
    constructs: Vec<Construct>,
}

impl Default for ConstructRegistry {
    fn default() -> Self {
        ConstructRegistry {
            constructs: ConstructId::ALL
                .iter()
                .map(|&id| {
                    let (lo, hi) = id.default_range();
                    Construct {
                        id,
                        lo,
                        hi,
                        kind: TaskKind::Regression,
                    }
                })
                .collect(),
        }
    }
}

impl ConstructRegistry {
    pub fn get(&self, id: ConstructId) -> &Construct {
        &self.constructs[id.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Construct> {
        self.constructs.iter()
    }

    fn set(&mut self, c: Construct) {
        self.constructs[c.id.index()] = c;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModalityKind {
    Wearable,
    PhoneAgent,
    Beacon,
    SocialMedia,
    HonHeart,
    HonStress,
    HeartRateDerived,
    /// Out-of-fold predictions of other constructs fed back as features.
    Proxy,
}

impl ModalityKind {
    /// Fixed fusion order.
    pub const ALL: [ModalityKind; 8] = [
        ModalityKind::Wearable,
        ModalityKind::PhoneAgent,
        ModalityKind::Beacon,
        ModalityKind::SocialMedia,
        ModalityKind::HonHeart,
        ModalityKind::HonStress,
        ModalityKind::HeartRateDerived,
        ModalityKind::Proxy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModalityKind::Wearable => "Wearable",
            ModalityKind::PhoneAgent => "PhoneAgent",
            ModalityKind::Beacon => "Beacon",
            ModalityKind::SocialMedia => "SocialMedia",
            ModalityKind::HonHeart => "HonHeart",
            ModalityKind::HonStress => "HonStress",
            ModalityKind::HeartRateDerived => "HeartRateDerived",
            ModalityKind::Proxy => "Proxy",
        }
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModalityKind::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("modality", format!("unknown modality `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Concatenate the selected blocks and fit one component on them.
    #[default]
    Feature,
    /// Fit the selected family per modality block and average the outputs.
    PerModalityMean,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature" => Ok(FusionMode::Feature),
            "per_modality_mean" => Ok(FusionMode::PerModalityMean),
            other => Err(Error::config("fusion_mode", format!("unknown mode `{other}`"))),
        }
    }
}

pub const SMAPE_DEFINITION: &str = "bounded-0-200";

// ---------------------------------------------------------------------------
// Raw (file) configuration. Every field is optional; `validate_config` fills
// defaults and checks invariants.

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub pipeline: PipelineSection,
    pub hon: HonSection,
    pub reduce: ReduceSection,
    pub impute: ImputeSection,
    pub models: ModelsSection,
    pub ensemble: EnsembleSection,
    pub eval: EvalSection,
    pub ingest: IngestSection,
    pub features: FeaturesSection,
    pub constructs: BTreeMap<String, ConstructSection>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub seed: Option<u64>,
    pub folds: Option<usize>,
    pub smape_definition: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct HonSection {
    pub orders: Option<Vec<usize>>,
    pub pca_components: Option<usize>,
    pub slot_minutes: Option<u32>,
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ReduceSection {
    pub top_k_per_modality: Option<usize>,
    pub social_pca_components: Option<usize>,
    pub method: Option<CorrMethod>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ImputeSection {
    pub default: Option<Strategy>,
    pub policy: BTreeMap<String, Strategy>,
    pub full_modality: Option<Strategy>,
    pub donor: Option<String>,
    pub k_clusters: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsSection {
    pub candidates: Option<Vec<CandidateSpec>>,
    pub classification_candidates: Option<Vec<CandidateSpec>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub holdout_fraction: Option<f64>,
    pub fusion_mode: Option<FusionMode>,
    pub proxy_pass: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub bootstrap_samples: Option<usize>,
    pub gemm_restarts: Option<usize>,
    pub gemm_iters: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    /// Plausible `[lo, hi]` per signal or feature name.
    pub rules: BTreeMap<String, [f64; 2]>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesSection {
    pub rssi_cutoff: Option<f64>,
    /// Per-participant UTC offset in minutes.
    pub utc_offsets: BTreeMap<String, i32>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ConstructSection {
    pub range: Option<[f64; 2]>,
    pub kind: Option<TaskKind>,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeSettings {
    pub default: Strategy,
    pub per_modality: BTreeMap<ModalityKind, Strategy>,
    pub full_modality: Strategy,
    pub donor: ModalityKind,
    pub k_clusters: usize,
}

impl ImputeSettings {
    pub fn strategy_for(&self, modality: ModalityKind) -> Strategy {
        self.per_modality
            .get(&modality)
            .copied()
            .unwrap_or(self.default)
    }
}

/// Configuration with every default filled and every invariant checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatedConfig {
    pub seed: u64,
    pub folds: usize,
    pub top_k_per_modality: usize,
    pub social_pca_components: usize,
    pub selection_method: CorrMethod,
    pub hon_orders: Vec<usize>,
    pub hon_pca_components: usize,
    pub hon_bins: usize,
    pub slot_minutes: u32,
    pub smape_definition: String,
    pub imputation: ImputeSettings,
    pub candidates: Vec<CandidateSpec>,
    pub classification_candidates: Vec<CandidateSpec>,
    pub holdout_fraction: f64,
    pub fusion_mode: FusionMode,
    pub proxy_pass: bool,
    pub bootstrap_samples: usize,
    pub gemm_restarts: usize,
    pub gemm_iters: usize,
    pub screening_rules: BTreeMap<String, (f64, f64)>,
    pub rssi_cutoff: f64,
    pub utc_offsets: BTreeMap<String, i32>,
    pub constructs: ConstructRegistry,
}

impl ValidatedConfig {
    /// Stable hash of the serialized configuration, recorded in run manifests.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn candidates_for(&self, kind: TaskKind) -> &[CandidateSpec] {
        match kind {
            TaskKind::Regression => &self.candidates,
            TaskKind::Classification => &self.classification_candidates,
        }
    }
}

impl Default for ValidatedConfig {
    fn default() -> Self {
        validate_config(PipelineConfig::default()).expect("defaults are valid")
    }
}

/// Plausibility rules seeded with the error classes seen in the field data:
/// sleep beyond a day, negative commutes, impossible heart rates.
pub fn default_screening_rules() -> BTreeMap<String, (f64, f64)> {
    [
        ("sleep_minutes", (0.0, 1440.0)),
        ("commute_minutes", (0.0, f64::MAX)),
        ("heart_rate", (25.0, 250.0)),
        ("stress", (0.0, 100.0)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub fn validate_config(cfg: PipelineConfig) -> Result<ValidatedConfig> {
    let folds = cfg.pipeline.folds.unwrap_or(5);
    if folds < 2 {
        return Err(Error::config("folds", "must be at least 2"));
    }
    let smape_definition = cfg
        .pipeline
        .smape_definition
        .unwrap_or_else(|| SMAPE_DEFINITION.to_string());
    if smape_definition != SMAPE_DEFINITION {
        return Err(Error::config(
            "smape_definition",
            format!("only `{SMAPE_DEFINITION}` is supported"),
        ));
    }

    let top_k = cfg.reduce.top_k_per_modality.unwrap_or(20);
    if top_k < 1 {
        return Err(Error::config("top_k_per_modality", "must be at least 1"));
    }
    let social_pca_components = cfg.reduce.social_pca_components.unwrap_or(200);
    if social_pca_components < 1 {
        return Err(Error::config("social_pca_components", "must be at least 1"));
    }

    let hon_orders = cfg.hon.orders.unwrap_or_else(|| vec![1, 2, 3, 4, 5]);
    if hon_orders.is_empty() {
        return Err(Error::config("hon_orders", "must be nonempty"));
    }
    if hon_orders.contains(&0) {
        return Err(Error::config("hon_orders", "orders must be at least 1"));
    }
    let mut hon_orders = hon_orders;
    hon_orders.sort_unstable();
    hon_orders.dedup();
    let hon_pca_components = cfg.hon.pca_components.unwrap_or(5);
    if hon_pca_components < 1 {
        return Err(Error::config("hon_pca_components", "must be at least 1"));
    }
    let hon_bins = cfg.hon.bins.unwrap_or(3);
    if hon_bins < 2 {
        return Err(Error::config("hon_bins", "must be at least 2"));
    }
    let slot_minutes = cfg.hon.slot_minutes.unwrap_or(30);
    if slot_minutes == 0 {
        return Err(Error::config("slot_minutes", "must be positive"));
    }

    let mut per_modality = BTreeMap::new();
    for (name, strategy) in cfg.impute.policy {
        let m: ModalityKind = name
            .parse()
            .map_err(|_| Error::config("impute.policy", format!("unknown modality `{name}`")))?;
        if strategy == Strategy::ClusterCrossStream {
            return Err(Error::config(
                "impute.policy",
                "cluster_cross_stream applies to full-modality gaps only (set impute.full_modality)",
            ));
        }
        per_modality.insert(m, strategy);
    }
    per_modality
        .entry(ModalityKind::HeartRateDerived)
        .or_insert(Strategy::RollingMean);
    let default_strategy = cfg.impute.default.unwrap_or(Strategy::Mean);
    if matches!(
        default_strategy,
        Strategy::ClusterCrossStream | Strategy::RollingMean
    ) {
        return Err(Error::config(
            "impute.default",
            "default must be a per-feature strategy (mean, median, zero)",
        ));
    }
    let full_modality = cfg
        .impute
        .full_modality
        .unwrap_or(Strategy::ClusterCrossStream);
    let donor = match cfg.impute.donor {
        Some(d) => d.parse()?,
        None => ModalityKind::Wearable,
    };
    let k_clusters = cfg.impute.k_clusters.unwrap_or(5);
    if k_clusters < 1 {
        return Err(Error::config("k_clusters", "must be at least 1"));
    }

    let candidates = cfg
        .models
        .candidates
        .unwrap_or_else(CandidateSpec::default_regression_set);
    if candidates.is_empty() {
        return Err(Error::config("models.candidates", "must be nonempty"));
    }
    let classification_candidates = cfg
        .models
        .classification_candidates
        .unwrap_or_else(CandidateSpec::default_classification_set);
    for c in candidates.iter() {
        c.validate()?;
        if c.family.is_classifier() {
            return Err(Error::config(
                "models.candidates",
                format!("{} is a classifier", c.family),
            ));
        }
    }
    for c in classification_candidates.iter() {
        c.validate()?;
        if !c.family.is_classifier() {
            return Err(Error::config(
                "models.classification_candidates",
                format!("{} is a regressor", c.family),
            ));
        }
    }

    let holdout_fraction = cfg.ensemble.holdout_fraction.unwrap_or(0.2);
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::config("holdout_fraction", "must lie in [0, 1)"));
    }

    let mut constructs = ConstructRegistry::default();
    for (name, section) in cfg.constructs {
        let id: ConstructId = name.parse()?;
        let mut c = *constructs.get(id);
        if let Some([lo, hi]) = section.range {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::config(
                    "constructs.range",
                    format!("{name}: need finite lo < hi"),
                ));
            }
            c.lo = lo;
            c.hi = hi;
        }
        if let Some(kind) = section.kind {
            c.kind = kind;
        }
        constructs.set(c);
    }
    let any_classification = constructs
        .iter()
        .any(|c| c.kind == TaskKind::Classification);
    if any_classification && classification_candidates.is_empty() {
        return Err(Error::config(
            "models.classification_candidates",
            "must be nonempty when any construct is a classification target",
        ));
    }

    let mut screening_rules = default_screening_rules();
    for (name, [lo, hi]) in cfg.ingest.rules {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::config("ingest.rules", format!("{name}: need lo <= hi")));
        }
        // open bounds are stored finite so the config serializes to JSON
        screening_rules.insert(name, (lo.max(f64::MIN), hi.min(f64::MAX)));
    }

    let bootstrap_samples = cfg.eval.bootstrap_samples.unwrap_or(2000);
    if bootstrap_samples < 1 {
        return Err(Error::config("bootstrap_samples", "must be at least 1"));
    }

    Ok(ValidatedConfig {
        seed: cfg.pipeline.seed.unwrap_or(0),
        folds,
        top_k_per_modality: top_k,
        social_pca_components,
        selection_method: cfg.reduce.method.unwrap_or(CorrMethod::Spearman),
        hon_orders,
        hon_pca_components,
        hon_bins,
        slot_minutes,
        smape_definition,
        imputation: ImputeSettings {
            default: default_strategy,
            per_modality,
            full_modality,
            donor,
            k_clusters,
        },
        candidates,
        classification_candidates,
        holdout_fraction,
        fusion_mode: cfg.ensemble.fusion_mode.unwrap_or_default(),
        proxy_pass: cfg.ensemble.proxy_pass.unwrap_or(true),
        bootstrap_samples,
        gemm_restarts: cfg.eval.gemm_restarts.unwrap_or(20),
        gemm_iters: cfg.eval.gemm_iters.unwrap_or(200),
        screening_rules,
        rssi_cutoff: cfg.features.rssi_cutoff.unwrap_or(-70.0),
        utc_offsets: cfg.features.utc_offsets,
        constructs,
    })
}

/// Mix a base seed with a path of labels (splitmix64 finalizer per step).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut s = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in path {
        s = s.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        s = z ^ (z >> 31);
    }
    s
}
