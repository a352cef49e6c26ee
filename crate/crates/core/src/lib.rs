// Negated comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod divergence;
pub mod error;
pub mod harness;
pub mod learner;
pub mod mdp;
pub mod mirror;
pub mod numeric;
pub mod policy;
pub mod traces;
pub mod verification;

pub use error::{Error, Result};
