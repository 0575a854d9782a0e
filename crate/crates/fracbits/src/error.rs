//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not compose for an operation; names the offending axis.
    #[error("{op}: shape mismatch on {axis}: {detail}")]
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        detail: String,
    },

    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        row: usize,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("{op}: empty tensor")]
    EmptyTensor { op: &'static str },

    #[error("bitwidth {bits} outside supported range [{min}, {max}]")]
    BitwidthRange { bits: u8, min: u8, max: u8 },

    #[error(
        "quantizer specs ({floor_bits}, {ceil_bits}) do not bracket fractional bitwidth {n_frac}"
    )]
    BracketMismatch {
        floor_bits: u8,
        ceil_bits: u8,
        n_frac: f64,
    },

    #[error(
        "target of {s_target} bytes is below the minimum feasible footprint of {min_bytes} bytes \
         (all searchable layers at 2 bits)"
    )]
    InfeasibleTarget { s_target: u64, min_bytes: u64 },

    #[error("non-finite loss during {phase} epoch {epoch}{}", match .layer {
        Some(l) => format!(" (first non-finite gradient in layer '{l}')"),
        None => String::new(),
    })]
    NonFiniteLoss {
        phase: &'static str,
        epoch: usize,
        layer: Option<String>,
    },

    #[error("accumulator overflow in layer '{layer}' at output index {index}")]
    AccumulatorOverflow { layer: String, index: usize },

    #[error("code {code} out of {bits}-bit symmetric range in '{context}'")]
    CodeOutOfRange {
        code: i32,
        bits: u8,
        context: String,
    },

    #[error("layer '{layer}' of kind {kind} is not supported by {op}")]
    UnsupportedLayer {
        op: &'static str,
        layer: String,
        kind: &'static str,
    },

    #[error("{what}: need {needed}, have {available}")]
    InsufficientData {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("episode/embedding misalignment: expected {expected} rows, got {got}")]
    MisalignedEpisode { expected: usize, got: usize },

    /// Bit-serial output disagrees with the reference integer convolution.
    /// Always a functional bug, never a warning.
    #[error(
        "simulator mismatch in layer '{layer}' at output index {index}: bit-serial {bit_serial} \
         != reference {reference}"
    )]
    SimulatorMismatch {
        layer: String,
        index: usize,
        bit_serial: i64,
        reference: i64,
    },

    #[error("invalid configuration field '{field}': {detail}")]
    InvalidConfig { field: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
