//! Certified patch robustness through derandomized smoothing, with a
//! vision transformer base classifier that drops fully masked tokens.

pub mod ablation;
pub mod bench;
pub mod certify;
pub mod error;
pub mod io;
pub mod numerics;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
