//! Dense linear algebra, seeded randomness, optimizers and gradient checks.

pub mod matrix;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod svd;

pub use matrix::{axpy, dot, norm, Matrix};
pub use ops::{
    cross_entropy, finite_diff_grad, kl_divergence, relative_error, soft_cross_entropy, softmax,
    softmax_backward, softmax_in_place, PROB_EPS,
};
pub use optim::{Optimizer, OptimizerKind, Params};
pub use rng::Rng;
pub use svd::{svd_top, Svd};
