//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar walks the record once in reverse and
//! returns [`Gradients`] for every node that depends on a gradient leaf.

mod backward;
pub mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, piecewise_check_many, GradCheck, PIECEWISE_RUNGS};
pub use ops::ElementwiseKind;
pub use tape::{BinaryKind, Gradients, ReduceKind, Tape, UnaryKind, Var};
