//! Dense linear algebra, elementary neural ops, reverse-mode differentiation
//! and the finite-difference gradient checker.

pub mod gradcheck;
pub mod matrix;
pub mod params;
pub mod recurrence;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckReport, Objective, Probe};
pub use matrix::{linear, sigmoid, softmax, softmax_rows, DenseMatrix};
pub use params::ParamStore;
pub use tape::{Tape, Var};
