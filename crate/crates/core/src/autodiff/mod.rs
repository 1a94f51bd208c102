//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gemm;
pub mod gradcheck;
mod graph;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{AttentionDims, Graph, NodeId, KL_FLOOR, LAYER_NORM_EPS};
pub use params::{Param, ParamId, ParamStore};
pub use rng::{mix, RngState, SeededRng};
pub use tensor::Tensor;
