//! Minimal deterministic tensor engine: dense tensors, attention and
//! normalization kernels, and a recorded graph for reverse-mode gradients.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{
    attention, attention_backward, attention_forward, broadcast_zip, concat, layer_norm_backward,
    layer_norm_forward, layer_normalize, matmul, mean_axis, narrow, permute, softmax, sum_to_shape, Mask,
};
pub use tensor::{numel, strides, Real, Tensor};
