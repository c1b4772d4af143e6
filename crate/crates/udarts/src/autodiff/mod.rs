//! Dense-tensor reverse-mode automatic differentiation.
//!
//! Supplies exact gradients for every loss in the crate, for the virtual
//! weight step of the bi-level optimizer, and for the finite-difference
//! oracles used to cross-check them. 64-bit floats throughout: the
//! spectral estimates and finite-difference checks need the headroom.
//!
//! A [`Tape`] instance is single-threaded during forward/backward.
//! Distinct tapes over a shared read-only [`ParamStore`] may run in
//! parallel (used for Monte-Carlo sampling); parameters are mutated only
//! between passes.

pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{finite_diff_grad, Gradients, Param, ParamClass, ParamId, ParamStore};
pub use tape::{sigmoid, BatchStats, Tape, Var};
pub use tensor::Tensor;
