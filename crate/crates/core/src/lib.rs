//! Training across black-box reservoirs.
//!
//! A hybrid model is a trainable read-in network `f_a`, a frozen black box
//! `R` that only admits forward evaluation, and a trainable read-out `f_b`.
//! Backpropagation runs normally through `f_b`; at the reservoir boundary the
//! gradient `dL/dY_a` is estimated from forward perturbations (BOND, BONDS,
//! SPSA, FDSA) and injected into `f_a`'s cached graph.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod numerics;
pub mod optim;
pub mod oracle;
pub mod reservoirs;

pub use error::{Error, Result};
pub use numerics::{Rng, Tensor2};
