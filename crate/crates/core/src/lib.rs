//! Local-update methods on quadratic federated objectives.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod linalg;
pub mod localupdate;
pub mod lrdecay;
pub mod maml;
pub mod problem;
pub mod rng;
pub mod surrogate;

pub use error::{Error, Result};
