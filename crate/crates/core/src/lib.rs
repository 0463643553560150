//! Stein-method distance bounds for functionals of finite reversible Markov
//! kernels (exchangeable pairs), with exact operator identities, Hoeffding
//! decompositions on product spaces, structured spaces, degenerate U-statistics
//! and Monte Carlo verification.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::excessive_precision)]

pub mod applications;
pub mod core_operator;
pub mod error;
pub mod hoeffding;
pub mod json;
pub mod special;
pub mod stein_bounds;
pub mod structured;
pub mod ustat;
pub mod verify;

pub use error::{Error, Result};
