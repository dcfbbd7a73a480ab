//! Dense tensors and a define-by-run tape for reverse-mode differentiation.
//!
//! Operations are recorded on a [`Graph`] as they execute. The tape can be
//! replayed on new leaf values, differentiated with [`Graph::backward`], and
//! checked against central finite differences with [`grad_check`].

mod error;
mod graph;
mod gradcheck;
pub mod ops;
pub mod par;
mod scalar;
mod tensor;

pub use error::{OpError, Result, TensorError};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, InputReport};
pub use graph::{Forward, Graph, Operator, Saved, Var, Vjp};
pub use scalar::{matmul_into, DType, Real};
pub use tensor::{Tensor, TENSOR_MAGIC};
