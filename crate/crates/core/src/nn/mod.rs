//! Hand-differentiated layer kernels, parameter storage with Adam, and
//! finite-difference gradient checking. Double precision throughout.

mod gradcheck;
mod layers;
mod params;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport, Objective, Probe};
pub use layers::{
    conv3d_backward, conv3d_forward, conv3d_grad_raw, conv3d_raw, dense_backward, dense_forward, dense_grad_raw,
    dense_raw, relu_backward, relu_forward, relu_grad_raw, relu_raw, residual_add, residual_add_backward,
    Conv3dGrads, Conv3dShape, DenseGrads, Padding,
};
pub use params::{he_uniform, scaled_he_uniform, AdamConfig, Gradients, ParameterStore};
pub use tensor::Tensor;
