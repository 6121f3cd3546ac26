//! Low-rank experts: representation, persistence and vectorization.

pub mod adapter;
pub mod library;
pub mod vector;

pub use adapter::{LoraAdapter, SiteFactors, DEFAULT_ALPHA, DEFAULT_DROPOUT, DEFAULT_RANK};
pub use library::{fingerprint_hex, ExpertLibrary};
pub use vector::{cosine, cosine_similarity_matrix, flatten, unflatten, CosineBasis, ParamVector};
