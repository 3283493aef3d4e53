// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod config;
pub mod error;
pub mod math;
pub mod monitor;
pub mod parallel;
pub mod params_io;
pub mod policy;
pub mod predictor;
pub mod query;
pub mod retriever;
pub mod runtime;
pub mod synth;

pub use error::{Error, Result};
