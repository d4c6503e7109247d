// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod container;
pub mod dataset;
pub mod dsp;
pub mod dtw;
pub mod error;
pub mod features;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod signal;
pub mod synth;
pub mod toneme;
pub mod training;
pub mod vocoder;

pub use error::{Error, Result};
