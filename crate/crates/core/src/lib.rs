//! Bilevel graph learning through unrolled inner training.

// `!(x > 0.0)` style guards deliberately reject NaN along with the bound.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the matrix formulas they implement.
#![allow(clippy::needless_range_loop)]

pub mod ad;
pub mod bilevel;
pub mod data;
pub mod error;
pub mod graph;
pub mod inner;
pub mod lab;
pub mod neumann;
pub mod parallel;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
