//! Minimal dense-array numeric core with reverse-mode automatic
//! differentiation.
//!
//! Everything is f64: the model is tiny and the test suite relies on
//! finite-difference gradient checks at tight tolerances. A [`Tape`] records
//! one forward pass define-by-run style and is rebuilt per step; [`ParamStore`]
//! / [`GradStore`] hold named parameter and gradient arrays.

mod adam;
mod array;
mod gradcheck;
mod store;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use array::Array2;
pub use gradcheck::grad_check;
pub use store::{GradStore, ParamStore};
pub use tape::{CustomOp, Tape, Var};
