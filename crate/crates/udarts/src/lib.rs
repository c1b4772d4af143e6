//! Desk-scale laboratory for model-uncertainty-aware differentiable
//! architecture search.
//!
//! The crate couples a small dense-tensor autodiff core with DARTS-style
//! cells carrying concrete dropout, a bi-level optimizer whose validation
//! objective is regularized by Monte-Carlo predictive variance, spectral
//! diagnostics of the loss Hessians, and an exact logistic-model oracle
//! for the flat-minima eigenvalue bounds.
//!
//! Entry points:
//! - [`autodiff`]: tape, tensors, parameter store, finite-difference oracle.
//! - [`searchspace`]: candidate-op catalog, cells, mixed ops, discretization.
//! - [`uncertainty`]: concrete dropout, MC prediction, variance, KL regularizer.
//! - [`bilevel`]: composite losses, virtual step, architecture gradient,
//!   search epochs.
//! - [`spectral`]: Hessian-vector products and power iteration.
//! - [`linoracle`]: closed-form logistic Hessians and the eigenvalue lemmas.
//! - [`harness`]: synthetic datasets, IDX/CSV loaders, noise protocols.
//! - [`cli`]: experiment configs, subcommands, checkpoints, CSV/JSON reports.
//!
//! The `examples/` directory exercises each capability end to end; the
//! `udarts` binary wraps [`cli::run`].

pub mod autodiff;
pub mod bilevel;
pub mod cli;
pub mod error;
pub mod harness;
pub mod linoracle;
pub mod searchspace;
pub mod spectral;
pub mod uncertainty;
pub mod util;

pub use autodiff::{Gradients, ParamClass, ParamId, ParamStore, Tape, Tensor, Var};
pub use error::{Error, Result};
