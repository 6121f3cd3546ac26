use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lm::forward::{AdapterRef, Tape};
use crate::lm::model::BaseLm;
use crate::numerics::PROB_EPS;

/// Padding token; never produced by the task generators.
pub const PAD: u32 = 0;
/// Separates the input from the target.
pub const SEP: u32 = 1;

/// One supervised sequence: the model reads `input`, `SEP`, then must emit `target`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

/// Model-ready view of an [`Example`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    /// Tokens fed to the model (`x_{<t}`).
    pub tokens: Vec<u32>,
    /// Next token at every position (`x_t*`).
    pub targets: Vec<u32>,
    /// Loss is taken only where this is set: the separator and target positions.
    pub mask: Vec<bool>,
}

impl Example {
    pub fn new(input: Vec<u32>, target: Vec<u32>) -> Self {
        Self { input, target }
    }

    pub fn to_batch(&self) -> TokenBatch {
        let mut full = self.input.clone();
        full.push(SEP);
        full.extend(&self.target);
        let tokens = full[..full.len() - 1].to_vec();
        let targets = full[1..].to_vec();
        let mask = (0..tokens.len()).map(|t| t >= self.input.len()).collect();
        TokenBatch { tokens, targets, mask }
    }

    /// Number of positions that carry loss.
    pub fn num_targets(&self) -> usize {
        self.target.len()
    }
}

impl TokenBatch {
    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, m)| **m).map(|(t, _)| t)
    }
}

/// Next-token distributions at the masked positions, in position order.
pub fn target_distributions(
    base: &BaseLm,
    adapter: AdapterRef<'_>,
    example: &Example,
) -> Result<Vec<Vec<f64>>> {
    let batch = example.to_batch();
    let tape = base.forward(&batch.tokens, adapter, None)?;
    Ok(masked_probs(&tape, &batch))
}

pub(crate) fn masked_probs(tape: &Tape, batch: &TokenBatch) -> Vec<Vec<f64>> {
    batch.masked_positions().map(|t| tape.probs(t)).collect()
}

/// Summed token cross-entropy of distributions against the example's targets.
pub fn sum_token_loss(dists: &[Vec<f64>], target: &[u32]) -> f64 {
    dists
        .iter()
        .zip(target)
        .map(|(p, &y)| -(p[y as usize] + PROB_EPS).ln())
        .sum()
}
