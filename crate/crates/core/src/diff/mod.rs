//! Minimal reverse-mode differentiation over dense real vectors.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use params::{ParamSlice, ParamVector};
pub(crate) use tape::relu as relu_value;
pub use tape::{affine_into, AdjointFault, Gradients, NodeId, NodeKind, Op, Tape, TapeError};
