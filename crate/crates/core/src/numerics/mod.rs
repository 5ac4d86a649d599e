//! Dense arrays, layer primitives and the parameter store.

mod layers;
mod params;
mod scalar;
mod tensor;

pub use layers::{
    conv1d_dilated, conv1d_dilated_backward, conv1x1, conv1x1_backward, conv2d, conv2d_backward,
    global_avg_pool, global_avg_pool_backward, log_softmax, log_softmax_backward, relu, relu_backward,
    resize_bilinear, softmax, softmax_backward, Causality, Conv2dGrads, ConvGrads,
};
pub use params::{Param, ParamStore};
pub use scalar::{matmul, Scalar};
pub use tensor::Tensor;
