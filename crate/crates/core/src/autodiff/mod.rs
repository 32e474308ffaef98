//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations append nodes and
//! [`Tape::backward`] walks them once in reverse.

mod gradcheck;
mod opcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_with, relative_error, GradCheckOptions, GradCheckReport,
};
pub use opcheck::{op_suite, OpCheck, CHECKED_OPS};
pub use tape::{sigmoid, BatchNormMode, BatchStats, Gradients, Tape, Var, BATCH_NORM_EPS};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("function value {0} is not finite")]
    NonFinite(f64),
    #[error("{0}")]
    Invalid(String),
}
