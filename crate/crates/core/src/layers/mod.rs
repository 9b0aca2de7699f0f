//! Differentiable building blocks, each paired with a hand-written backward.

mod binarize;
mod conv;
mod gdn;
pub(crate) mod gemm;
mod lstm;
mod space;

pub use binarize::{binarize, binarize_backward, BinarizeMode};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvParams};
pub use gdn::{
    gdn_backward, gdn_forward, igdn_backward, igdn_forward, GdnGrads, GdnParams, BETA_FLOOR,
};
pub use lstm::{
    conv_lstm_backward, conv_lstm_step, conv_lstm_step_cached, LstmCache, LstmGrads, LstmParams,
    LstmState,
};
pub use space::{depth_to_space, depth_to_space_backward, space_to_depth};
