use thiserror::Error;

/// Errors surfaced by the numeric substrate and the model stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("swiglu input width {0} is odd")]
    OddWidth(usize),
    #[error("all positions masked out")]
    AllMasked,
    #[error("target id {id} out of range for vocab size {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },
    #[error("bad rank range: r_min={r_min}, r_max={r_max}, limit={limit}")]
    BadRank {
        r_min: usize,
        r_max: usize,
        limit: usize,
    },
    #[error("rank {rank} outside [{r_min}, {r_max}]")]
    RankOutOfRange {
        rank: usize,
        r_min: usize,
        r_max: usize,
    },
    #[error("backward cache does not match rank {0}")]
    StaleCache(usize),
    #[error("gradient rank {grad} does not match update rank {update}")]
    RankMismatch { grad: usize, update: usize },
    #[error("empty image")]
    EmptyImage,
    #[error("expected 3 channels, got {0}")]
    BadChannelCount(usize),
    #[error("image side {side} not divisible by patch size {patch}")]
    NonDivisible { side: usize, patch: usize },
    #[error("k={k} larger than corpus size {m}")]
    KTooLarge { k: usize, m: usize },
    #[error("zero-norm embedding at index {0}")]
    ZeroNorm(usize),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty question")]
    EmptyQuestion,
    #[error("empty candidate")]
    EmptyCandidate,
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("loss diverged (NaN) at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: usize },
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("classification needs at least 2 labels, got {0}")]
    TooFewLabels(usize),
    #[error("cross-attention requires at least one visual state")]
    EmptyVisual,
    #[error("gradient accumulator flushed with no accumulated steps")]
    EmptyAccumulator,
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("tensor {name} loaded with unexpected shape")]
    ShapeMismatchOnLoad { name: String },
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("missing class labels for similarity sampling")]
    MissingLabels,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
