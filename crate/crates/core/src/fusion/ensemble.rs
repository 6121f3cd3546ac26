use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::ExpertLibrary;
use crate::fusion::simplex::{SimplexWeights, WeightMode};
use crate::lm::{AdapterRef, BaseLm, Example};
use crate::numerics::{softmax_in_place, Matrix};

/// Where expert outputs are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleLevel {
    /// `p = Σ λ_i softmax(z_i)`
    #[default]
    Probability,
    /// `p = softmax(Σ λ_i z_i)`
    Logit,
}

/// Output-space combination of experts with one global coefficient vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSpec {
    pub weights: SimplexWeights,
    pub level: EnsembleLevel,
}

impl EnsembleSpec {
    pub fn new(weights: SimplexWeights, level: EnsembleLevel) -> Result<Self> {
        if weights.mode != WeightMode::Global {
            return Err(Error::Invalid("ensembles take one global coefficient vector".into()));
        }
        Ok(Self { weights, level })
    }

    pub fn lambda(&self) -> &[f64] {
        self.weights.row_for_layer(0)
    }
}

/// Weighted average of probability vectors.
pub fn mix_probabilities(dists: &[&[f64]], lambda: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; dists[0].len()];
    for (d, &l) in dists.iter().zip(lambda) {
        if l == 0.0 {
            continue;
        }
        for (o, p) in out.iter_mut().zip(d.iter()) {
            *o += l * p;
        }
    }
    out
}

/// Softmax of the weighted average of logit vectors.
pub fn mix_logits(logits: &[&[f64]], lambda: &[f64]) -> Vec<f64> {
    let mut out = mix_probabilities(logits, lambda);
    softmax_in_place(&mut out);
    out
}

/// Combined distribution at one position from the `N × V` expert logits there.
pub fn mix_position(level: EnsembleLevel, lambda: &[f64], expert_logits: &Matrix) -> Vec<f64> {
    let rows: Vec<&[f64]> = (0..expert_logits.rows()).map(|i| expert_logits.row(i)).collect();
    match level {
        EnsembleLevel::Logit => mix_logits(&rows, lambda),
        EnsembleLevel::Probability => {
            let probs: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    let mut p = r.to_vec();
                    softmax_in_place(&mut p);
                    p
                })
                .collect();
            let refs: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
            mix_probabilities(&refs, lambda)
        }
    }
}

/// Per masked position, the `N × V` logits of every expert run alone on `example`.
/// Experts listed in `skip` are left as zero rows.
pub fn expert_logits(
    base: &BaseLm,
    library: &ExpertLibrary,
    example: &Example,
    skip: &[bool],
) -> Result<Vec<Matrix>> {
    let batch = example.to_batch();
    let positions: Vec<usize> = batch.masked_positions().collect();
    let v = base.config.vocab;
    let mut out = vec![Matrix::zeros(library.len(), v); positions.len()];
    for (i, ad) in library.adapters().iter().enumerate() {
        if skip.get(i).copied().unwrap_or(false) {
            continue;
        }
        let tape = base.forward(&batch.tokens, AdapterRef::Lora(ad), None)?;
        for (k, &t) in positions.iter().enumerate() {
            out[k].row_mut(i).copy_from_slice(tape.logits.row(t));
        }
    }
    Ok(out)
}

/// Ensemble next-token distributions at the masked positions of `example`.
pub fn ensemble_predict(
    base: &BaseLm,
    library: &ExpertLibrary,
    spec: &EnsembleSpec,
    example: &Example,
) -> Result<Vec<Vec<f64>>> {
    let lambda = spec.lambda();
    if lambda.len() != library.len() {
        return Err(Error::Shape(format!(
            "{} coefficients for {} experts",
            lambda.len(),
            library.len()
        )));
    }
    library.check_compatible(base)?;
    // zero-weight experts contribute nothing at either level
    let skip: Vec<bool> = lambda.iter().map(|l| *l == 0.0).collect();
    let logits = expert_logits(base, library, example, &skip)?;
    Ok(logits.iter().map(|z| mix_position(spec.level, lambda, z)).collect())
}
