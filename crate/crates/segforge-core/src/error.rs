//! Error types, grouped by subsystem so the CLI can map them to exit codes.

use thiserror::Error;

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad configuration: invalid shapes/hyperparameters, malformed config
    /// files, incompatible checkpoints.
    Config,
    /// Bad or missing input data: files, directories, image contents.
    Data,
    /// Numerical failure at runtime (NaN/Inf reached a guarded boundary).
    Numeric,
}

/// Tensor and tape-level failures. Shape mismatches name both shapes so the
/// message is actionable without a debugger.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("rank {rank} tensor not supported (max rank 4)")]
    RankTooHigh { rank: usize },

    #[error("shape {shape} implies {expected} elements, buffer holds {got}")]
    LengthMismatch {
        shape: String,
        expected: usize,
        got: usize,
    },

    #[error("{op}: expected rank {expected}, got shape {got}")]
    BadRank {
        op: &'static str,
        expected: usize,
        got: String,
    },

    #[error("{op}: shapes {a} and {b} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        a: String,
        b: String,
    },

    #[error("conv2d: stride and dilation must be >= 1 (got stride {stride}, dilation {dilation})")]
    BadConvConfig { stride: usize, dilation: usize },

    #[error(
        "conv2d: effective kernel {eff}x{eff} exceeds padded input extent {ext_h}x{ext_w}"
    )]
    KernelExceedsInput {
        eff: usize,
        ext_h: usize,
        ext_w: usize,
    },

    #[error("batchnorm2d: inference requested but running statistics were never updated")]
    UninitializedStats,

    #[error("batchnorm2d: training statistics need at least 2 values per channel, got {got}")]
    TooFewStats { got: usize },

    #[error("maxpool2d: window {k}x{k} stride {stride} does not fit input {h}x{w}")]
    PoolTooLarge {
        k: usize,
        stride: usize,
        h: usize,
        w: usize,
    },

    #[error("upsample_nearest: factor must be >= 1")]
    BadUpsampleFactor,

    #[error("backward requires a scalar loss, got shape {got}")]
    NonScalarLoss { got: String },

    #[error("{op}: {message}")]
    Contract { op: &'static str, message: String },

    #[error("{op} produced a non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("gradient check: function is not deterministic (two forward passes differ at index {index})")]
    NonDeterministicFn { index: usize },

    #[error("gradient check: function returned non-finite value {value}")]
    NonFiniteCheckValue { value: f64 },
}

/// Model construction and forward-contract failures.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("filters must be non-decreasing, got {0:?}")]
    FiltersNotMonotone(Vec<usize>),

    #[error("filter width {width} must be divisible by se_reduction = {r}")]
    SeReductionMismatch { width: usize, r: usize },

    #[error("input_size {0} must be divisible by 8 and at least 8")]
    BadInputSize(usize),

    #[error("in_channels must be >= 1")]
    NoInputChannels,

    #[error("aspp_rates must be non-empty and every rate >= 1, got {0:?}")]
    BadAsppRates(Vec<usize>),

    #[error("model expects input [N, {c}, {s}, {s}], got {got}")]
    WrongInput { c: usize, s: usize, got: String },

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Checkpoint encoding/decoding failures. Each corruption mode is distinct.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic (expected \"SFCK\")")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    BadVersion { found: u32, supported: u32 },

    #[error("truncated checkpoint: {context}")]
    Truncated { context: &'static str },

    #[error("checkpoint record {index} has unknown dtype tag {tag}")]
    BadDtype { index: usize, tag: u8 },

    #[error("checkpoint dtype {found:?} does not match requested element type {expected:?}")]
    DtypeMismatch {
        expected: crate::element::Dtype,
        found: crate::element::Dtype,
    },

    #[error("record name is not valid UTF-8")]
    BadName,

    #[error("record {index} rank {rank} exceeds max rank 4")]
    BadRank { index: usize, rank: u8 },

    #[error("record dimensions overflow when multiplied")]
    DimsOverflow,

    #[error("unknown parameter name {name:?}")]
    UnknownParameter { name: String },

    #[error("parameter {name:?} appears twice")]
    DuplicateParameter { name: String },

    #[error("parameter {name:?} missing from checkpoint")]
    MissingParameter { name: String },

    #[error("parameter {name:?} has shape {got}, model expects {expected}")]
    ShapeMismatch {
        name: String,
        expected: String,
        got: String,
    },

    #[error("{n} trailing bytes after last record")]
    TrailingBytes { n: usize },

    #[error("embedded model config is invalid: {0}")]
    BadConfig(String),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Data pipeline failures: decoding, pairing, splitting, synthesis.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("cannot decode {path} as PNG: {message}")]
    Decode { path: String, message: String },

    #[error("{path}: unsupported bit depth or color type {kind} (8-bit gray/RGB/RGBA only)")]
    UnsupportedPixelFormat { path: String, kind: String },

    #[error("image {image} is {iw}x{ih} but mask {mask} is {mw}x{mh}")]
    PairSizeMismatch {
        image: String,
        mask: String,
        iw: u32,
        ih: u32,
        mw: u32,
        mh: u32,
    },

    #[error("no mask found for image {image} (expected {expected})")]
    MissingMask { image: String, expected: String },

    #[error("no image/mask pairs found under {dir}")]
    EmptyDataset { dir: String },

    #[error("dataset of {n} samples is too small to split (minimum 10)")]
    SplitTooSmall { n: usize },

    #[error("synthesis rejected {attempts} candidates for sample {id}; relax the foreground band")]
    SynthExhausted { id: String, attempts: usize },

    #[error("batch_size must be >= 1")]
    BadBatchSize,

    #[error("mask for {id} contains value {value} (masks must be exactly 0 or 1)")]
    MaskNotBinary { id: String, value: f64 },
}

/// Training-loop failures.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {step}; last good state saved")]
    NonFiniteLoss { step: usize },

    #[error("gradient for parameter {name:?} is non-finite at step {step}")]
    NonFiniteGrad { name: String, step: usize },

    #[error("parameter update for {name:?} produced non-finite values at step {step}")]
    NonFiniteUpdate { name: String, step: usize },

    #[error("training set is empty")]
    EmptyTrainSet,

    #[error("cannot write {path}: {source}")]
    Output {
        path: String,
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Data(#[from] DataError),
}

impl TrainError {
    /// True for the NaN/Inf abort family (exit code 4 territory).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteLoss { .. }
                | TrainError::NonFiniteGrad { .. }
                | TrainError::NonFiniteUpdate { .. }
                | TrainError::Tensor(TensorError::NonFinite { .. })
        )
    }
}

/// Run-config parsing and validation failures.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("config is not valid JSON: {0}")]
    Json(String),

    #[error("{field}: {message}")]
    Invalid {
        field: &'static str,
        message: String,
    },

    #[error(transparent)]
    Model(#[from] ModelError),
}
