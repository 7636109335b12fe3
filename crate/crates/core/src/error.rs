use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("row {index} has zero norm")]
    ZeroNormRow { index: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix data length {actual} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, actual: usize },
    #[error("non-finite value at flat offset {offset}")]
    NonFinite { offset: usize },
    #[error("grid {height}x{width} does not cover {tokens} tokens")]
    InvalidGrid { height: usize, width: usize, tokens: usize },
    #[error("layers are not token-aligned; align them to a common grid first")]
    UnalignedLayers,
    #[error("layer matrix carries no spatial grid")]
    MissingGrid,
    #[error("invalid layer stack: {0}")]
    InvalidStack(String),
    #[error("index set must be strictly increasing and below {bound}")]
    InvalidIndexSet { bound: usize },
    #[error("non-finite layer score")]
    NonFiniteScore,
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("mixture weights must be non-negative and sum to 1")]
    InvalidMixture,
    #[error("invalid class profile for category {category}: {reason}")]
    InvalidProfile { category: u8, reason: String },
    #[error("profile table: {0}")]
    InvalidProfileTable(String),
    #[error("layer {0} is not present in the stack")]
    MissingLayer(u32),
    #[error("invalid attention record: {0}")]
    InvalidAttention(String),
    #[error("no attention record available for stage layer {0}")]
    MissingAttention(u32),
    #[error("token {0} has no attention column")]
    UnknownToken(usize),
    #[error("budget {requested} exceeds pool of {available} tokens")]
    BudgetExceedsPool { requested: usize, available: usize },
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("split ratio {0} outside [0, 1]")]
    InvalidRatio(f64),
    #[error("pivot set is empty")]
    EmptyPivotSet,
    #[error("seed set is empty")]
    EmptySeedSet,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("stage at layer {stage_layer}: {source}")]
    Stage { stage_layer: u32, source: Box<Error> },
    #[error("category {0} outside 0..=8")]
    InvalidCategory(u32),
    #[error("rule file line {line}: {reason}")]
    RuleParse { line: usize, reason: String },
    #[error("duplicate rule priority {0}")]
    DuplicatePriority(i64),
    #[error("rule pattern is empty")]
    EmptyPattern,
    #[error("maximum of the score vector is not unique")]
    DegenerateArgmax,
    #[error("no calibration samples for category {0}")]
    NoSamples(u8),
    #[error("duplicate calibration sample id {0:?}")]
    DuplicateSample(String),
    #[error("invalid candidate space: {0}")]
    InvalidCandidateSpace(String),
    #[error("scorer failed on category {category}, layer set {layer_set}, ratio {ratio}, sample {sample}: {message}")]
    ScorerFailure { category: u8, layer_set: usize, ratio: f64, sample: String, message: String },
}

impl Error {
    pub(crate) fn at_stage(self, stage_layer: u32) -> Self {
        Error::Stage { stage_layer, source: Box::new(self) }
    }
}
