//! Bit-serial accelerator model: exact bit-plane execution of quantized
//! layers and the cycle/latency/energy/memory accounting that stands in for
//! hardware measurement.

pub mod bitplane;
pub mod compare;
pub mod conv;
pub mod cost;

pub use bitplane::{pack_bitplanes, BitPlane, BitPlanePackedWeights};
pub use compare::{compare_models, comparison_csv, CompareRow, ModelPoint};
pub use conv::{bit_serial_conv, direct_int_conv, direct_int_matmul};
pub use cost::{layer_cycles, model_cost, uniform_bits, AccelConfig, CostReport, CostRow};
