//! Numeric foundation: matrices, the seeded stream, MLPs, Adam and the
//! finite-difference oracle.

pub mod adam;
pub mod finite_diff;
pub mod loss;
pub mod matrix;
pub mod mlp;
pub mod rng;

pub use adam::{adam_step, AdamState};
pub use finite_diff::finite_diff_grad;
pub use loss::{softmax, softmax_xent};
pub use matrix::{matmul, Matrix};
pub use mlp::{
    mlp_backward, mlp_backward_with_input, mlp_forward, mlp_predict, per_example_grads, Activation,
    sigmoid, ForwardCache, Layer, MlpParams, PerExampleGrads,
};
pub use rng::RngState;
