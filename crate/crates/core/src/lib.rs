// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datakit;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod fedsim;
pub mod geoattn;
pub mod gradsuite;
pub mod losses;
pub mod planner;
pub mod seed;
pub mod trainer;

pub use error::{AnydError, Result};
