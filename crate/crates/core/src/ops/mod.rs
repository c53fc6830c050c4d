//! Differentiable primitives beyond the elementwise basics: shape movement,
//! dense projections, convolution, normalisation, attention, and the
//! finite-difference gradient checker used to validate all of them.

pub mod attention;
pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod norm;
pub mod shape;

pub use gradcheck::{grad_check, grad_check_masked, GradReport};
