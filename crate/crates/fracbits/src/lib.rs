//! Mixed-precision bitwidth search for small audio classifiers, paired with
//! a bit-serial accelerator cost model.
//!
//! The crate is organized around five concerns:
//! - [`tensor`], [`graph`], [`ops`], [`optim`]: a minimal f64 reverse-mode
//!   autodiff engine sized for desk-scale convolutional/recurrent nets.
//! - [`quant`]: symmetric integer fake-quantization with clipped
//!   straight-through gradients.
//! - [`nas`], [`accounting`]: fractional-bitwidth interpolation, the
//!   byte-budget size loss, and round-and-freeze.
//! - [`model`], [`data`], [`episode`], [`eval`], [`search`]: the two
//!   reference networks, synthetic tasks, and the search/QAT trainer.
//! - [`sim`], [`infer`]: exact bit-plane execution of quantized layers plus
//!   cycle/latency/energy/memory accounting.

pub mod accounting;
pub mod data;
pub mod episode;
pub mod error;
pub mod eval;
pub mod graph;
pub mod infer;
pub mod model;
pub mod nas;
pub mod ops;
pub mod optim;
pub mod quant;
pub mod search;
pub mod seeds;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{IntTensor, Tensor};
