//! Frozen base language model with low-rank adapter injection sites.

pub mod batch;
pub mod forward;
pub mod model;
mod persist;

pub use batch::{sum_token_loss, target_distributions, Example, TokenBatch, PAD, SEP};
pub use forward::{AdapterRef, Dropout, GradSink, Tape};
pub use model::{BaseLm, LmConfig, SiteId, SiteKind, SITES_PER_LAYER};
