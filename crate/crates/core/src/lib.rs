//! Method-of-moments electromagnetics, channel models, eigenvector-based
//! localization with likelihood-ratio reliability checks, and RIS impedance
//! optimization for near-field source localization.

// `!(x > 0.0)` is used on purpose so that NaN fails validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod el;
pub mod error;
pub mod geometry;
pub mod impedance;
pub mod linalg;
pub mod locate;
pub mod optim;
mod quad;
pub mod risopt;
pub mod scenario;
pub mod signal;

pub use error::{Error, Result};
