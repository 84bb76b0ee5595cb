use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("non-finite value {0}")]
    NonFiniteValue(f64),
    #[error("unknown construct `{0}`")]
    UnknownConstruct(String),

    #[error("schema error in column `{column}`: {reason}")]
    SchemaError { column: String, reason: String },
    #[error("parse error at row {row}, column `{column}`: {reason}")]
    ParseError {
        row: usize,
        column: String,
        reason: String,
    },
    #[error("duplicate timestamp {timestamp} for participant `{participant}`")]
    DuplicateTimestamp {
        participant: String,
        timestamp: String,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty series")]
    EmptySeries,
    #[error("order {order} exceeds every segment length")]
    OrderTooHigh { order: usize },
    #[error("rank deficient: requested {requested} components, {available} informative")]
    RankDeficient { requested: usize, available: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("no usable features for {0}")]
    NoUsableFeatures(String),
    #[error("invalid component count {requested} (max {max})")]
    InvalidComponents { requested: usize, max: usize },

    #[error("no donor rows: need {needed}, have {available}")]
    NoDonorRows { needed: usize, available: usize },

    #[error("singular system")]
    SingularSystem,
    #[error("not enough rows: need {needed}, have {available}")]
    NotEnoughRows { needed: usize, available: usize },
    #[error("unsupported for family {0}")]
    Unsupported(String),
    #[error("invalid hyperparameter `{name}`: {reason}")]
    InvalidHyperparameter { name: String, reason: String },

    #[error("too few participants: {available} for {folds} folds")]
    TooFewParticipants { available: usize, folds: usize },
    #[error("every fusion block is empty")]
    EmptyFusion,

    #[error("empty input")]
    EmptyInput,
    #[error("zero variance input")]
    ZeroVariance,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("model format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Variant name, for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig { .. } => "InvalidConfig",
            Error::NonFiniteValue(..) => "NonFiniteValue",
            Error::UnknownConstruct(..) => "UnknownConstruct",
            Error::SchemaError { .. } => "SchemaError",
            Error::ParseError { .. } => "ParseError",
            Error::DuplicateTimestamp { .. } => "DuplicateTimestamp",
            Error::InsufficientData(..) => "InsufficientData",
            Error::EmptySeries => "EmptySeries",
            Error::OrderTooHigh { .. } => "OrderTooHigh",
            Error::RankDeficient { .. } => "RankDeficient",
            Error::DegenerateInput(..) => "DegenerateInput",
            Error::SchemaMismatch(..) => "SchemaMismatch",
            Error::NoUsableFeatures(..) => "NoUsableFeatures",
            Error::InvalidComponents { .. } => "InvalidComponents",
            Error::NoDonorRows { .. } => "NoDonorRows",
            Error::SingularSystem => "SingularSystem",
            Error::NotEnoughRows { .. } => "NotEnoughRows",
            Error::Unsupported(..) => "Unsupported",
            Error::InvalidHyperparameter { .. } => "InvalidHyperparameter",
            Error::TooFewParticipants { .. } => "TooFewParticipants",
            Error::EmptyFusion => "EmptyFusion",
            Error::EmptyInput => "EmptyInput",
            Error::ZeroVariance => "ZeroVariance",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::Io { .. } => "Io",
            Error::Csv(..) => "Csv",
            Error::Json(..) => "Json",
            Error::Toml(..) => "Toml",
        }
    }

    /// File path named by the error, if any.
    pub fn path(&self) -> Option<&str> {
        match self {
            Error::Io { path, .. } => Some(path),
            _ => None,
        }
    }
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
