#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod model_selection;
pub mod nn_solver;
pub mod nystrom;
pub mod parallel;
pub mod risk;
pub mod rkhs_solver;

pub use error::{MmrError, Result};
