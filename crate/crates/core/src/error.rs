use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("input of {got} samples is shorter than one analysis window ({need})")]
    InputTooShort { got: usize, need: usize },
    #[error("babble pool is empty or smaller than the requested talker count")]
    EmptyPool,
    #[error("signal has zero power")]
    ZeroPowerSignal,
    #[error("sequence of {frames} frames cannot host two disjoint windows of {window}")]
    TooShortToJumble { frames: usize, window: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("odd-one-out group needs at least 2 clips, got {0}")]
    GroupTooSmall(usize),
    #[error("batch of {batch} clips is smaller than the group size {group}")]
    BatchTooSmall { batch: usize, group: usize },
    #[error("multi-task weight {0} outside [0, 1]")]
    InvalidWeight(f64),
    #[error("sequence too short: need at least {need}, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("label error: {0}")]
    Label(String),
    #[error("paired differences have zero variance")]
    DegenerateTest,
    #[error("missing modality: {0}")]
    MissingModality(String),
    #[error("missing labels: {0}")]
    MissingLabels(String),
    #[error("mode violation: {0}")]
    ModeViolation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("subset is empty (fraction {0})")]
    EmptySubset(f64),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = core::result::Result<T, Error>;
