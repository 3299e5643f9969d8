//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! Every operation is recorded on a [`Tape`] as it is evaluated. Calling
//! [`Tape::backward`] on a scalar node fills the gradient of every
//! differentiable node that the root depends on. Shapes are explicit: there is
//! no broadcasting beyond the `1×out` bias row of [`Tape::affine`] and the
//! scalar arguments of [`Tape::scale`] / [`Tape::add_scalar`].
//!
//! ```
//! use fbgs::ndiff::{Array, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.var(Array::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).data()[0], 6.0);
//! ```

mod array;
mod check;
mod tape;

pub use array::Array;
pub use check::{central_difference, grad_check};
pub use tape::{row_softmax, DiffNode, Tape, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NdiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("{len} values cannot fill a {rows}x{cols} array")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("log of non-positive value {0}")]
    NonPositiveLog(f64),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("{0} needs a non-empty input")]
    Empty(&'static str),
}
