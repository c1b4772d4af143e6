//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward called on an empty graph (no forward recorded)")]
    BackwardBeforeForward,

    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShapeMismatch { seed: Vec<usize>, output: Vec<usize> },

    #[error("invalid tensor: shape {shape:?} implies {expected} elements, data has {got}")]
    BadTensor {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("finite-difference step must be positive, got {0}")]
    BadFdStep(f64),

    #[error("predictive variance needs at least 2 samples, got {0}")]
    VarianceNeedsSamples(usize),

    #[error("dropout probability saturated at site {site} (logit {logit}); clamped for entropy")]
    DropoutSaturated { site: usize, logit: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("k={k} exceeds the {available} non-zero candidates of node {node}")]
    KExceedsCandidates {
        k: usize,
        available: usize,
        node: usize,
    },

    #[error("channel mismatch in {site}: expected {expected}, got {got}")]
    ChannelMismatch {
        site: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid network spec: {0}")]
    BadNetworkSpec(String),

    #[error("power iteration degenerated: Hv vanished for 3 consecutive iterations")]
    DegenerateSpectrum,

    #[error("zero validation gradient: second-order term skipped")]
    ZeroValidGradient,

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("IDX parse error at byte {offset}: {reason}")]
    IdxParse { offset: u64, reason: String },

    #[error("CSV parse error at line {line}: {reason}")]
    CsvParse { line: usize, reason: String },

    #[error("unknown dataset source `{0}`")]
    UnknownSource(String),

    #[error("dataset too small: need at least {need} samples, got {got}")]
    DatasetTooSmall { need: usize, got: usize },

    #[error("checkpoint array `{array}` is corrupt (hash mismatch)")]
    CheckpointCorrupt { array: String },

    #[error("checkpoint config hash {found} does not match supplied config {expected}")]
    ConfigHashMismatch { found: String, expected: String },

    #[error("checkpoint is missing array `{array}`")]
    CheckpointMissing { array: String },

    #[error("checkpoint shape for `{array}` is {found:?}, config implies {expected:?}")]
    CheckpointShape {
        array: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("instance violates |alpha|^2 < 1 (got {0})")]
    AlphaNormTooLarge(f64),

    #[error("sigma_ud argument q={0} outside [0, 1]")]
    SigmaUdDomain(f64),

    #[error("acceptance check failed: {0}")]
    AcceptanceFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
