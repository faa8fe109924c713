//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Backward rules are expressed with the same recorded operations as the
//! forward pass, so gradients can be differentiated again (needed for
//! gradient penalties on a critic's input gradient).

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod real;
pub mod tensor;
pub mod var;

pub use gradcheck::{check_gradients, GradCheckReport, GradCheckTolerance};
pub use ops::{concat, conv2d_input_grad, conv2d_weight_grad};
pub use optim::{AdamConfig, AdamState};
pub use real::Real;
pub use tensor::{ConvGeom, Tensor};
pub use var::{grad, grad_enabled, no_grad, Var};
