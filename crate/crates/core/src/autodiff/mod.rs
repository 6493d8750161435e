//! Minimal reverse-mode differentiation.
//!
//! A [`Tape`] records values and the operations that produced them. Each
//! [`Operation`] supplies a forward evaluation and a vector-Jacobian
//! product; [`Tape::backward`] walks the record in reverse and returns the
//! gradient of a scalar loss with respect to every parameter leaf.
//!
//! The operation set is deliberately small: what the ensemble needs and no
//! more. Model-specific operations live next to the model code and plug in
//! through the [`Operation`] trait.

mod gradcheck;
pub mod ops;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, Operation, Tape, Var};
