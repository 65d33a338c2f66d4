use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the analysis library.
///
/// Each variant maps to a distinct CLI exit code through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unreadable container {path}: {reason}")]
    UnreadableContainer { path: PathBuf, reason: String },

    #[error("invalid name map: {0}")]
    InvalidNameMap(String),

    #[error("non-finite weight in `{0}`")]
    NonFiniteWeight(String),

    #[error("token id {id} out of range (d_voc = {d_voc})")]
    IdOutOfRange { id: usize, d_voc: usize },

    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("position {pos} out of range (limit {limit})")]
    PositionOutOfRange { pos: usize, limit: usize },

    #[error("head {head} out of range (n_heads = {n_heads})")]
    HeadOutOfRange { head: usize, n_heads: usize },

    #[error("neuron {neuron} out of range (d_mlp = {d_mlp})")]
    NeuronOutOfRange { neuron: usize, d_mlp: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("probability vector not normalized (sum = {sum})")]
    NotNormalized { sum: f64 },

    #[error("kernel classification needs at least {min} positions, got {len}")]
    ContextTooShort { len: usize, min: usize },

    #[error("Hoeffding bound needs content bounds A <= B")]
    MissingBounds,

    #[error("Chebyshev bound needs a content variance")]
    MissingVariance,

    #[error("invalid concentration inputs: {0}")]
    InvalidConcentration(String),

    #[error("kernels have mixed anchors")]
    MixedAnchors,

    #[error("text too short: need {need} tokens, have {have}")]
    TooShort { need: usize, have: usize },

    #[error("non-finite value for head {head}, token {token}")]
    NonFinite { head: usize, token: usize },

    #[error("head {head} is not covered by the calibration")]
    UncalibratedHead { head: usize },

    #[error("rank {rank} out of range for row of length {len}")]
    RankOutOfRange { rank: usize, len: usize },

    #[error("degenerate variance: true series is constant")]
    DegenerateVariance,

    #[error("table file: {0}")]
    TableFormat(String),

    #[error("table was built under a different calibration: {0}")]
    StaleTable(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable kind, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingTensor(_) => "MissingTensor",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::UnreadableContainer { .. } => "UnreadableContainer",
            Error::InvalidNameMap(_) => "InvalidNameMap",
            Error::NonFiniteWeight(_) => "NonFiniteWeight",
            Error::IdOutOfRange { .. } => "IdOutOfRange",
            Error::MalformedLine { .. } => "MalformedLine",
            Error::EmptyCorpus => "EmptyCorpus",
            Error::PositionOutOfRange { .. } => "PositionOutOfRange",
            Error::HeadOutOfRange { .. } => "HeadOutOfRange",
            Error::NeuronOutOfRange { .. } => "NeuronOutOfRange",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::NotNormalized { .. } => "NotNormalized",
            Error::ContextTooShort { .. } => "ContextTooShort",
            Error::MissingBounds => "MissingBounds",
            Error::MissingVariance => "MissingVariance",
            Error::InvalidConcentration(_) => "InvalidConcentration",
            Error::MixedAnchors => "MixedAnchors",
            Error::TooShort { .. } => "TooShort",
            Error::NonFinite { .. } => "NonFinite",
            Error::UncalibratedHead { .. } => "UncalibratedHead",
            Error::RankOutOfRange { .. } => "RankOutOfRange",
            Error::DegenerateVariance => "DegenerateVariance",
            Error::TableFormat(_) => "TableFormat",
            Error::StaleTable(_) => "StaleTable",
            Error::Config(_) => "ConfigError",
            Error::Io { .. } => "Io",
            Error::Json { .. } => "Json",
        }
    }

    /// Process exit code for this error. `0` and `1` are never used.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingTensor(_) => 10,
            Error::ShapeMismatch { .. } => 11,
            Error::UnreadableContainer { .. } => 12,
            Error::InvalidNameMap(_) => 13,
            Error::NonFiniteWeight(_) => 14,
            Error::IdOutOfRange { .. } => 20,
            Error::MalformedLine { .. } => 21,
            Error::EmptyCorpus => 22,
            Error::PositionOutOfRange { .. } => 30,
            Error::HeadOutOfRange { .. } => 31,
            Error::NeuronOutOfRange { .. } => 32,
            Error::LengthMismatch { .. } => 33,
            Error::NotNormalized { .. } => 34,
            Error::ContextTooShort { .. } => 35,
            Error::MissingBounds => 40,
            Error::MissingVariance => 41,
            Error::InvalidConcentration(_) => 42,
            Error::MixedAnchors => 50,
            Error::TooShort { .. } => 51,
            Error::NonFinite { .. } => 52,
            Error::UncalibratedHead { .. } => 53,
            Error::RankOutOfRange { .. } => 60,
            Error::DegenerateVariance => 61,
            Error::TableFormat(_) => 70,
            Error::StaleTable(_) => 71,
            Error::Io { .. } => 80,
            Error::Json { .. } => 81,
        }
    }
}
