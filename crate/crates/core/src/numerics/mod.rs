//! Differentiable compute kernels, gradient checking and the parameter
//! container format.

pub mod container;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use container::Container;
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use kernels::{affine, log_softmax, recurrent_step, sigmoid, LstmCell, LstmState};
pub use optim::{Adam, AdamConfig};
pub use tape::{log_add, log_sigmoid, log_sum_exp, Tape, Var};
pub use tensor::{Gradients, ParamId, ParamSet, Parameter, Tensor};
