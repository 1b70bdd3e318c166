//! Nonparametric maximum likelihood estimation of mixing distributions in
//! mixed logit and probit discrete choice models.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod cli;
pub mod data;
pub mod em;
pub mod error;
pub mod kernel;
pub mod metrics;
pub mod mixture;
pub mod study;
pub mod weights;

pub use error::{Error, Result};
pub use nalgebra;
