//! Minimal 64-bit numeric core: tensors, layers with explicit backward
//! passes, losses, Adam and finite-difference verification.

mod gradcheck;
mod gru;
mod layers;
mod loss;
mod params;
mod tensor;

pub use gradcheck::{check_parameters, finite_difference_check, relative_error, GradCheckReport, FD_STEP, REL_ERROR_FLOOR};
pub use gru::{GruCell, GruStepCache};
pub use layers::{
    mean_pool2x2, mean_pool2x2_backward, relu, relu_backward, sigmoid, sigmoid_backward,
    sigmoid_scalar, tanh, tanh_backward, Conv2d, Embedding, Linear,
};
pub use loss::{cross_entropy, huber, log_softmax, mse, softmax, LossOutput};
pub use params::{AdamConfig, ParamId, Parameter, ParameterSet, CHECKPOINT_HEADER};
pub use tensor::{matmul, Tensor};
