//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.
//!
//! A [`Tape`] is rebuilt for every forward pass. Parameters live in a
//! [`ParamStore`] and are bound to the tape with [`Tape::param`]; frozen
//! parameters enter as constants and never receive gradients.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use ops::{combine_rows, concrete_mask};
pub use tape::{Gradients, NodeId, Param, ParamGroup, ParamId, ParamStore, Tape, Var};
