//! Ensembling, merging and routing of low-rank adapter experts over a small
//! built-in causal language model.

pub mod analysis;
pub mod binfmt;
pub mod error;
pub mod expert;
pub mod fusion;
pub mod harness;
pub mod lm;
pub mod numerics;
pub mod routing;
pub mod train;

pub use error::{Error, Result};
