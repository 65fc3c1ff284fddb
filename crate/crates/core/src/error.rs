use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty shape: {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid network config: {0}")]
    InvalidConfig(String),

    #[error("layer range {start}..{end} out of bounds for depth {depth}")]
    LayerOutOfRange {
        start: usize,
        end: usize,
        depth: usize,
    },

    #[error("invalid BP target: {0}")]
    InvalidTarget(String),

    #[error("dataset violates separation assumption: {0}")]
    AssumptionViolated(String),

    #[error(
        "rejection budget of {attempts} attempts exhausted after placing {placed} of {wanted} points \
         ({violating_pairs} violating pairs in last candidate)"
    )]
    Infeasible {
        attempts: usize,
        placed: usize,
        wanted: usize,
        violating_pairs: usize,
    },

    #[error("idx: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },

    #[error("idx: truncated {what}: need {need} bytes, have {have}")]
    Truncated {
        what: &'static str,
        need: usize,
        have: usize,
    },

    #[error("idx: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("snapshot: {0}")]
    Snapshot(String),

    #[error("perturbation invariant violated: {0}")]
    Perturbation(String),

    #[error("training log carries no drift data")]
    MissingDrift,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
