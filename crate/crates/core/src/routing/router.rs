use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_in_place, Matrix, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `|w·h|`
    Absolute,
    /// `w·h`
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterInit {
    Zero,
    Arrow,
}

/// Per-site linear routers over an ordered set of experts.
///
/// `sites[s]` has one row per expert (library order) and one column per hidden unit
/// of the stream entering site `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    pub sites: Vec<Matrix>,
    pub score: ScoreMode,
    /// `None` keeps every expert.
    pub top_k: Option<usize>,
    pub init: RouterInit,
}

impl Router {
    pub fn zeros(num_sites: usize, experts: usize, width: usize, score: ScoreMode) -> Self {
        Self {
            sites: (0..num_sites).map(|_| Matrix::zeros(experts, width)).collect(),
            score,
            top_k: None,
            init: RouterInit::Zero,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.sites.first().map_or(0, Matrix::rows)
    }

    pub fn with_top_k(mut self, k: Option<usize>) -> Self {
        self.top_k = k;
        self
    }

    /// Routing coefficients at `site` for hidden state `h`.
    pub fn coeffs(&self, site: usize, h: &[f64]) -> Result<Vec<f64>> {
        let w = self
            .sites
            .get(site)
            .ok_or(Error::OutOfRange { index: site, size: self.sites.len() })?;
        if h.len() != w.cols() {
            return Err(Error::Shape(format!(
                "hidden state of {} for router width {}",
                h.len(),
                w.cols()
            )));
        }
        let raw = self.scores(site, h);
        let mut lambda: Vec<f64> = raw
            .iter()
            .map(|&r| match self.score {
                ScoreMode::Absolute => r.abs(),
                ScoreMode::Plain => r,
            })
            .collect();
        softmax_in_place(&mut lambda);
        match self.top_k {
            Some(k) => apply_topk(&lambda, k),
            None => Ok(lambda),
        }
    }

    /// Raw `W·h` before the score transform.
    pub fn scores(&self, site: usize, h: &[f64]) -> Vec<f64> {
        let w = &self.sites[site];
        (0..w.rows()).map(|i| dot(w.row(i), h)).collect()
    }
}

impl Params for Router {
    fn blocks(&self) -> Vec<&[f64]> {
        self.sites.iter().map(Matrix::data).collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.sites.iter_mut().map(Matrix::data_mut).collect()
    }
}

/// Indices of the `k` largest entries, ties to the lower index.
pub fn topk_mask(lambda: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..lambda.len()).collect();
    order.sort_by(|&a, &b| lambda[b].total_cmp(&lambda[a]).then(a.cmp(&b)));
    let mut mask = vec![false; lambda.len()];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    mask
}

/// Keep the `k` largest coefficients and renormalize them to sum to one.
pub fn apply_topk(lambda: &[f64], k: usize) -> Result<Vec<f64>> {
    let n = lambda.len();
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("top-k {k} outside 1..={n}")));
    }
    if k == n {
        return Ok(lambda.to_vec());
    }
    renormalize(lambda, &topk_mask(lambda, k))
}

/// `λ_i m_i / Σ_j λ_j m_j`. The smallest kept coefficient takes the remainder
/// `1 − Σ(others)`, so the result sums to one as closely as floating point allows.
pub(crate) fn renormalize(lambda: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let z: f64 = lambda
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(v, _)| v)
        .sum();
    if z <= 0.0 {
        return Err(Error::DegenerateRouting);
    }
    let mut out: Vec<f64> = lambda
        .iter()
        .zip(mask)
        .map(|(v, m)| if *m { v / z } else { 0.0 })
        .collect();
    let mut last = None;
    for i in 0..lambda.len() {
        if mask[i] && last.is_none_or(|j: usize| lambda[i] <= lambda[j]) {
            last = Some(i);
        }
    }
    if let Some(j) = last {
        let rest: f64 = (0..out.len()).filter(|&i| i != j).map(|i| out[i]).sum();
        out[j] = (1.0 - rest).max(0.0);
    }
    Ok(out)
}
