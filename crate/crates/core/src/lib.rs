//! Balanced k-nearest-neighbor hot-deck imputation.

pub mod calibration;
pub mod cli;
pub mod data;
pub mod donor;
pub mod error;
pub mod imputers;
pub mod linalg;
pub mod mu284;
pub mod neighbors;
pub mod psi;
pub mod sim;
pub mod variance;

pub use error::{DataError, Error, PsiError, RakeError, Result};
