use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::BaseLm;
use crate::numerics::{Matrix, Params, Rng};

/// Reference adapter rank.
pub const DEFAULT_RANK: usize = 4;
/// Reference adapter scaling factor α.
pub const DEFAULT_ALPHA: f64 = 16.0;
/// Reference dropout on the adapter branch (training only).
pub const DEFAULT_DROPOUT: f64 = 0.05;

/// One site's low-rank pair: `ΔW = A·B` with `A: n×r`, `B: r×m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteFactors {
    pub a: Matrix,
    pub b: Matrix,
}

impl SiteFactors {
    pub fn zeros(out_dim: usize, in_dim: usize, rank: usize) -> Self {
        Self {
            a: Matrix::zeros(out_dim, rank),
            b: Matrix::zeros(rank, in_dim),
        }
    }

    /// Unscaled `A·B`.
    pub fn product(&self) -> Matrix {
        self.a.matmul(&self.b).expect("factor shapes checked at construction")
    }
}

/// A low-rank adapter covering every injection site of one base model.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub sites: Vec<SiteFactors>,
    pub rank: usize,
    pub alpha: f64,
    pub fingerprint: u64,
    pub task: Option<String>,
}

impl LoraAdapter {
    /// All-zero adapter shaped for `base`.
    pub fn zeros(base: &BaseLm, rank: usize, alpha: f64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Invalid("adapter rank must be at least 1".into()));
        }
        let sites = base
            .site_dims()
            .iter()
            .map(|&(n, m)| SiteFactors::zeros(n, m, rank))
            .collect();
        Ok(Self {
            sites,
            rank,
            alpha,
            fingerprint: base.fingerprint(),
            task: None,
        })
    }

    /// Training initialization: `A` small Gaussian, `B = 0`, so the initial update is zero.
    pub fn init_for_training(base: &BaseLm, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        let mut ad = Self::zeros(base, rank, alpha)?;
        for site in &mut ad.sites {
            let std = 1.0 / (site.a.rows() as f64).sqrt();
            for v in site.a.data_mut() {
                *v = std * rng.normal();
            }
        }
        Ok(ad)
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn with_task(mut self, task: impl Into<String>) -> Self {
        self.task = Some(task.into());
        self
    }

    /// Scaled dense update `(α/r)·A·B` for one site.
    pub fn delta(&self, site: usize) -> Matrix {
        self.sites[site].product().scaled(self.scaling())
    }

    /// Checks fingerprint and per-site shapes against `base`.
    pub fn check_compatible(&self, base: &BaseLm) -> Result<()> {
        if self.fingerprint != base.fingerprint() {
            return Err(Error::FingerprintMismatch);
        }
        let dims = base.site_dims();
        if dims.len() != self.sites.len() {
            return Err(Error::Shape(format!(
                "adapter has {} sites, base has {}",
                self.sites.len(),
                dims.len()
            )));
        }
        for (s, (&(n, m), f)) in dims.iter().zip(&self.sites).enumerate() {
            if f.a.shape() != (n, self.rank) || f.b.shape() != (self.rank, m) {
                return Err(Error::Shape(format!(
                    "site {s}: A {:?} B {:?}, expected A ({n}, {}) B ({}, {m})",
                    f.a.shape(),
                    f.b.shape(),
                    self.rank,
                    self.rank
                )));
            }
        }
        Ok(())
    }

    /// Same rank, scaling and site shapes.
    pub fn same_layout(&self, other: &LoraAdapter) -> bool {
        self.rank == other.rank
            && self.alpha == other.alpha
            && self.fingerprint == other.fingerprint
            && self.sites.len() == other.sites.len()
            && self
                .sites
                .iter()
                .zip(&other.sites)
                .all(|(x, y)| x.a.shape() == y.a.shape() && x.b.shape() == y.b.shape())
    }
}

impl Params for LoraAdapter {
    fn blocks(&self) -> Vec<&[f64]> {
        self.sites
            .iter()
            .flat_map(|s| [s.a.data(), s.b.data()])
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.sites
            .iter_mut()
            .flat_map(|s| [s.a.data_mut(), s.b.data_mut()])
            .collect()
    }
}
