//! Input-dependent fusion: per-site routers, Arrow initialization, top-k
//! sparsification and hierarchical-cluster routing.

pub mod arrow;
pub mod cluster;
pub mod fit;
pub mod router;

pub use arrow::{arrow_init, arrow_row};
pub use cluster::{build_hc_routing, cluster_adapters, ClusterRouting, HcInit, HcObjective, HcParams};
pub use fit::{calibration_delta, fit_router, RouterObjective};
pub use router::{apply_topk, topk_mask, Router, RouterInit, ScoreMode};
