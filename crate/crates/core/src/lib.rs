// `!(x > 0.0)` rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod ensemble;
pub mod error;
pub mod levy;
pub mod limit;
pub mod rate;
pub mod regimes;
pub mod rng;
pub mod special;
pub mod stats;

pub use error::{Error, Result};
pub use levy::{Cumulant, LevyModel, UpperLimit};
pub use rate::{RatePoint, RateProfile};
