#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Inverse-dynamics trajectory optimization for planar robots with compliant
//! contact.

pub mod banded;
pub mod contact;
pub mod dynamics;
pub mod error;
pub mod mpc;
pub mod problem;
pub mod scenario;
pub mod solver;

pub use error::{Error, Result};
pub use nalgebra;
