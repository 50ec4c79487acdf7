//! Dense network substrate: matrices, flat parameters, forward and reverse
//! passes, softmax cross-entropy and a finite-difference gradient checker.

mod gradcheck;
mod loss;
mod matrix;
mod network;
mod params;

pub use gradcheck::finite_difference_check;
pub use loss::{argmax, softmax_cross_entropy, softmax_rows};
pub use matrix::Matrix;
pub(crate) use matrix::{add_transposed_matmul, matmul, matmul_transposed};
pub use network::{
    backward, backward_trace, forward_features, forward_trace, init_params, param_layout,
    validate_specs, Activation, ForwardTrace, LayerSpec,
};
pub use params::{ParamVector, Segment};
