//! Error type shared across the crate.

use thiserror::Error;

/// Coarse classification used by front ends to pick exit codes:
/// data errors cover malformed inputs, numeric errors cover violated
/// preconditions and degenerate values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed safetensors file {file}: {detail}")]
    MalformedHeader { file: String, detail: String },

    #[error("invalid JSON header in {file}: {detail}")]
    HeaderJson { file: String, detail: String },

    #[error("tensor {name} in {file}: {detail}")]
    BadTensorEntry {
        file: String,
        name: String,
        detail: String,
    },

    #[error("tensors {a} and {b} in {file} have overlapping byte ranges")]
    OverlappingRanges { file: String, a: String, b: String },

    #[error("duplicate tensor name {name} (in {first} and {second})")]
    DuplicateTensor {
        name: String,
        first: String,
        second: String,
    },

    #[error("unsupported dtype {dtype} for tensor {name}")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("tensor {name} not found in checkpoint")]
    TensorNotFound { name: String },

    #[error("tensor {name} has shape {shape:?}; only 2-D tensors load as matrices")]
    NotAMatrix { name: String, shape: Vec<usize> },

    #[error("non-finite value in tensor {name} at flat index {index}")]
    NonFinite { name: String, index: usize },

    #[error("preset error: {0}")]
    Preset(String),

    #[error("tensor {name} matches more than one projection kind ({kinds})")]
    AmbiguousKind { name: String, kinds: String },

    #[error("layout is missing the ({layer}, {kind}) projection matrix")]
    MissingCell { layer: usize, kind: String },

    #[error("duplicate projection matrix for ({layer}, {kind}): {first} and {second}")]
    DuplicateCell {
        layer: usize,
        kind: String,
        first: String,
        second: String,
    },

    #[error("inconsistent shapes within kind {kind}: {a} is {a_shape:?} but {b} is {b_shape:?}")]
    ShapeMismatch {
        kind: String,
        a: String,
        a_shape: Vec<usize>,
        b: String,
        b_shape: Vec<usize>,
    },

    #[error("no projection tensors matched the preset")]
    NoLayers,

    #[error("adapter module ({layer}, {kind}) has {present} without {missing}")]
    UnpairedAdapter {
        layer: usize,
        kind: String,
        present: String,
        missing: String,
    },

    #[error("adapter pair ({layer}, {kind}): A has rank {a_rank} but B has rank {b_rank}")]
    AdapterRankMismatch {
        layer: usize,
        kind: String,
        a_rank: usize,
        b_rank: usize,
    },

    #[error("shape mismatch composing delta for ({layer}, {kind}): {detail}")]
    ComposeShape {
        layer: usize,
        kind: String,
        detail: String,
    },

    #[error("report parse error at byte {offset}: {detail}")]
    ReportParse { offset: usize, detail: String },

    #[error("report schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u64, expected: u64 },

    #[error("normalization scheme mismatch: {a} vs {b}")]
    SchemeMismatch { a: String, b: String },

    #[error("fingerprints cover different kinds: {a} vs {b}")]
    KindCoverageMismatch { a: String, b: String },

    #[error("empty group: at least one matrix is required")]
    EmptyGroup,

    #[error("degenerate group {kind}: standard deviation is zero")]
    DegenerateGroup { kind: String },

    #[error("all standard deviations are equal; min-max normalization has zero range")]
    ZeroRange,

    #[error("rank {rank} out of range for {name} ({rows}x{cols})")]
    RankOutOfRange {
        rank: usize,
        name: String,
        rows: usize,
        cols: usize,
    },

    #[error("degenerate profile for {name}: all singular values are zero")]
    DegenerateProfile { name: String },

    #[error("sample size {n} exceeds group element count {total}")]
    SampleTooLarge { n: usize, total: usize },

    #[error("k={k} must be between 1 and the number of profiles ({n})")]
    KTooLarge { k: usize, n: usize },

    #[error("profile set is empty")]
    EmptyProfiles,

    #[error("label alignment requires k=2 (got k={k})")]
    AlignmentRequiresTwoClusters { k: usize },

    #[error("projection needs at least {need} profiles of dimension >= 2 (got {got} of dimension {dim})")]
    ProjectionTooSmall { need: usize, got: usize, dim: usize },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wrap with a human-readable location, e.g. the (layer, kind) being processed.
    pub fn with_context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::EmptyGroup
            | Error::DegenerateGroup { .. }
            | Error::ZeroRange
            | Error::RankOutOfRange { .. }
            | Error::DegenerateProfile { .. }
            | Error::SampleTooLarge { .. }
            | Error::KTooLarge { .. }
            | Error::EmptyProfiles
            | Error::AlignmentRequiresTwoClusters { .. }
            | Error::ProjectionTooSmall { .. } => ErrorClass::Numeric,
            Error::Context { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
