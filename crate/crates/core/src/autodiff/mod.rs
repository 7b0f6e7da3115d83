//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod graph;
mod layers;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Grads, Graph, Var, OPS, SIGMA_FLOOR};
pub use layers::{apply_layer, Bound, Layer, ParamId, ParamStore, Stack};
pub use tensor::{channel_stats, ChannelStats, Tensor};
