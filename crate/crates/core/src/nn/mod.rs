//! Differentiable numeric primitives and the layers built from them.

pub mod gradcheck;
pub mod graph;
pub mod layers;
mod mask;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use graph::{sigmoid, Gradients, Graph, NodeId, RelPos, LAYER_NORM_EPS};
pub use layers::{EncoderLayer, FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use mask::SeqMask;
pub use params::{embedding_normal, xavier_uniform, ParamId, ParamStore};
pub use tensor::Tensor;
