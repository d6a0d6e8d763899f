// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation_map;
pub mod cli;
pub mod config;
pub mod error;
pub mod linalg;
pub mod network;
pub mod optimizer;
pub mod sampled_filter;
pub mod sensitivity;

pub use error::{Error, Result};
