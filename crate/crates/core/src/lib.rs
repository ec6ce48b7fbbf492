//! Analysis and simulation of skill-based queueing and matching systems with
//! product-form stationary distributions.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod assignment;
pub mod detailed;
pub mod dist;
pub mod dynamics;
pub mod error;
pub mod model;
pub mod nested;
pub mod oi;
pub mod sim;

pub use error::{Error, Result};
pub use model::{BitSet, ModelKind, Rate, SystemBuilder, SystemSpec};
pub use num_rational::BigRational;
