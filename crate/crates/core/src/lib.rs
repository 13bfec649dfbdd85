#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod data;
pub mod error;
pub mod infer;
pub mod nn;
pub mod qubit;
pub mod sim;

pub use error::{Error, FormatError, Result};
