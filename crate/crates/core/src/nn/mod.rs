//! Minimal reverse-mode differentiable tensor library.

mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled};
pub use graph::{ConvParams, Gradients, Graph, Unary, Var};
pub use layers::{sinc_filters, Ctx, Layer, LayerKind, Mode, SincSpec};
pub use params::{Param, ParamId, ParamStore, PARAMS_MAGIC};
pub use tensor::Tensor;
