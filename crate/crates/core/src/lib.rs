//! Numerical laboratory for one-phase free boundary problems governed by
//! fully nonlinear uniformly elliptic operators.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod barriers;
pub mod cli;
pub mod error;
pub mod flatness;
pub mod grid;
pub mod hodograph;
pub mod linalg;
pub mod oblique;
pub mod operators;
pub mod perron;
pub mod sampling;
pub mod scheme;

pub use error::{Error, Result};
pub use linalg::SymMatrix;
