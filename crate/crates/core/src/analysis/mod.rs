//! Evaluation protocol, interpolation sweeps, clustering and expert selection.

pub mod cluster;
pub mod eval;
pub mod interp;
pub mod select;

pub use cluster::{cluster_similarity, mbc_cluster, ClusterAssignment, LinkStep};
pub use eval::{
    eval_method, expert_task_matrix, loss_sum, oracle_eval, rank_check, standard_error, token_mean, EvalReport,
    Method, TaskData,
};
pub use interp::{combined_loss, interpolate, interpolate_pair, InterpolationSweep};
pub use select::{full_oracle_value, greedy_select, subset_value, SelectionCurve};
