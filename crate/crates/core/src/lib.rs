// negated float comparisons deliberately reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod condense;
pub mod dictionary;
pub mod error;
pub mod io;
pub mod model;
pub mod pce;
pub mod plants;
pub mod simulate;
pub mod solver;

pub use error::{Error, Result};
