//! Virtual-time simulator for compressed distributed SGD with bidirectional
//! (worker-to-server and server-to-worker) sparsification.

// `!(x <= y)` is used on purpose so NaN lands on the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compress;
pub mod error;
pub mod harness;
pub mod methods;
pub mod problems;
pub mod selection;
pub mod streams;
pub mod timemodel;
pub mod tuner;

pub use error::{Error, Result};
