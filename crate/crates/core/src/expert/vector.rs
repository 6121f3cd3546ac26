use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::adapter::LoraAdapter;
use crate::expert::library::ExpertLibrary;
use crate::numerics::{dot, norm, Matrix, Params};

/// Adapter parameters flattened in canonical order: for each site, `A` then `B`,
/// both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

/// What a similarity is measured on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineBasis {
    /// Concatenated raw `(A, B)` factors.
    #[default]
    Factors,
    /// Reconstructed per-site `A·B`.
    Delta,
}

pub fn flatten(adapter: &LoraAdapter) -> ParamVector {
    ParamVector(adapter.flat())
}

/// Inverse of [`flatten`]; `template` supplies shapes and metadata.
pub fn unflatten(vector: &ParamVector, template: &LoraAdapter) -> Result<LoraAdapter> {
    let mut out = template.clone();
    out.set_flat(&vector.0)?;
    Ok(out)
}

fn delta_vector(adapter: &LoraAdapter) -> Vec<f64> {
    adapter
        .sites
        .iter()
        .flat_map(|s| s.product().into_vec())
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Pairwise cosine similarities between experts, `N × N`.
pub fn cosine_similarity_matrix(library: &ExpertLibrary, basis: CosineBasis) -> Result<Matrix> {
    let vecs: Vec<Vec<f64>> = library
        .adapters()
        .iter()
        .map(|a| match basis {
            CosineBasis::Factors => a.flat(),
            CosineBasis::Delta => delta_vector(a),
        })
        .collect();
    let norms: Vec<f64> = vecs.iter().map(|v| norm(v)).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroNorm(library.names()[i].clone()));
    }
    let n = vecs.len();
    let mut s = Matrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let c = (dot(&vecs[i], &vecs[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            s[(i, j)] = c;
            s[(j, i)] = c;
        }
    }
    Ok(s)
}
