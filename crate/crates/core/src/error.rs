use thiserror::Error;

use crate::fusion::AlignmentViolation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("bad magic: expected \"RPTQTNSR\"")]
    BadMagic,

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u32),

    #[error("zero axis in shape {0:?}")]
    ZeroAxis(Vec<usize>),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("invalid quantization parameters: {0}")]
    InvalidParams(String),

    #[error("invalid range: min {min} > max {max}")]
    InvalidRange { min: f64, max: f64 },

    #[error("channel count mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("cluster count {g} invalid for {n} points")]
    ClusterCount { g: usize, n: usize },

    #[error("singular hessian: {0}")]
    SingularHessian(String),

    #[error("configuration outside the integer accumulation envelope: {0}")]
    OverflowEnvelope(String),

    #[error("{} alignment violation(s): {}", .0.len(), format_violations(.0))]
    Alignment(Vec<AlignmentViolation>),

    #[error("instance too large for exhaustive search: {0}")]
    InstanceTooLarge(String),

    #[error("unknown {kind} '{name}' (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("missing statistics for site {0}")]
    MissingStats(String),

    #[error("kv cache mismatch: {0}")]
    CacheMismatch(String),

    #[error("missing stage artifact {0}")]
    MissingArtifact(String),
}

fn format_violations(v: &[AlignmentViolation]) -> String {
    v.iter()
        .map(|x| x.edge.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}
