//! Input-independent fusion: output ensembles, parameter merges, minimax weights
//! and distillation.

pub mod ensemble;
pub mod fit;
pub mod lp;
pub mod merge;
pub mod simplex;

pub use ensemble::{ensemble_predict, mix_logits, mix_probabilities, EnsembleLevel, EnsembleSpec};
pub use fit::{
    distill, fit_ensemble_weights, fit_merge_weights, mean_kl, mean_loss, teacher_targets, DistillOutcome,
    EnsembleObjective, ExpertOutputs, MergeObjective,
};
pub use lp::{lp_minimax_weights, worst_case, ErrorMatrix, MinimaxSolution};
pub use merge::{merge_factors, merge_fullrank, merge_lowrank, mix, DenseDelta};
pub use simplex::{SimplexLogits, SimplexWeights, WeightMode};
