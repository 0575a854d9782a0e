//! Pure tensor kernels: forward and backward functions with no graph state.
//! The graph in [`crate::graph`] dispatches into these.

pub mod conv;
pub mod linear;
pub mod loss;
pub mod pointwise;
pub mod proto;
pub mod recurrent;

pub use conv::{conv2d, conv2d_backward, ConvParams};
pub use linear::{dense, dense_backward};
pub use loss::{softmax_cross_entropy, softmax_cross_entropy_backward};
pub use pointwise::{
    freq_mean_to_seq, freq_mean_to_seq_backward, relu, relu_backward, spatial_mean_pool,
    spatial_mean_pool_backward, time_mean_pool, time_mean_pool_backward,
};
pub use proto::{prototypical_loss, prototypical_loss_backward, EpisodeShape};
pub use recurrent::{recurrent, recurrent_backward};
