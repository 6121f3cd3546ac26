use std::path::Path;

use crate::binfmt::{FileKind, TensorFile};
use crate::error::{Error, Result};
use crate::expert::{ExpertLibrary, LoraAdapter, SiteFactors};
use crate::lm::{BaseLm, SiteId};
use crate::fusion::simplex::SimplexWeights;
use crate::numerics::Matrix;

/// Full-rank per-site weight updates, already multiplied by the adapter scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseDelta {
    pub sites: Vec<Matrix>,
    pub fingerprint: u64,
}

impl DenseDelta {
    pub fn from_adapter(adapter: &LoraAdapter) -> Self {
        let s = adapter.scaling();
        Self {
            sites: adapter.sites.iter().map(|f| f.product().scaled(s)).collect(),
            fingerprint: adapter.fingerprint,
        }
    }

    pub fn check_compatible(&self, base: &BaseLm) -> Result<()> {
        if self.fingerprint != base.fingerprint() {
            return Err(Error::FingerprintMismatch);
        }
        let dims = base.site_dims();
        if dims.len() != self.sites.len() {
            return Err(Error::Shape(format!(
                "dense delta has {} sites, base has {}",
                self.sites.len(),
                dims.len()
            )));
        }
        for (s, (m, d)) in self.sites.iter().zip(dims).enumerate() {
            if m.shape() != d {
                return Err(Error::Shape(format!("dense delta site {s} is {:?}, expected {d:?}", m.shape())));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        TensorFile {
            kind: FileKind::DenseDelta,
            dims: vec![self.sites.len() as u64],
            scalars: Vec::new(),
            fingerprint: self.fingerprint,
            tensors: self.sites.iter().enumerate().map(|(s, m)| (format!("site{s}"), m.clone())).collect(),
        }
        .write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = TensorFile::read(path)?;
        file.expect_kind(FileKind::DenseDelta)?;
        let n = *file.dims.first().ok_or_else(|| Error::Invalid("dense delta header lacks dims".into()))? as usize;
        let sites = (0..n).map(|s| file.tensor(&format!("site{s}")).cloned()).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sites,
            fingerprint: file.fingerprint,
        })
    }

    pub fn max_abs_diff(&self, other: &DenseDelta) -> f64 {
        self.sites
            .iter()
            .zip(&other.sites)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// `Σ λ_i X_i`, evaluated around the largest-weight term so that one-hot
/// coefficients and identical inputs reproduce their input exactly.
pub fn mix(mats: &[&Matrix], lambda: &[f64]) -> Matrix {
    debug_assert_eq!(mats.len(), lambda.len());
    let mut p = 0;
    for (i, &l) in lambda.iter().enumerate() {
        if l > lambda[p] {
            p = i;
        }
    }
    let mut out = mats[p].clone();
    let pivot = mats[p].data();
    for (i, m) in mats.iter().enumerate() {
        if i == p || lambda[i] == 0.0 {
            continue;
        }
        let l = lambda[i];
        for ((o, x), xp) in out.data_mut().iter_mut().zip(m.data()).zip(pivot) {
            *o += l * (x - xp);
        }
    }
    out
}

fn check(library: &ExpertLibrary, weights: &SimplexWeights) -> Result<usize> {
    let sites = library.get(0).sites.len();
    let layers = sites.div_ceil(crate::lm::SITES_PER_LAYER);
    weights.check(library.len(), layers)?;
    Ok(sites)
}

/// Factor-wise merge: `A* = Σ λ_i A_i`, `B* = Σ λ_i B_i` at every site, using the
/// coefficients of that site's layer.
pub fn merge_lowrank(library: &ExpertLibrary, weights: &SimplexWeights) -> Result<LoraAdapter> {
    check(library, weights)?;
    let refs: Vec<&LoraAdapter> = library.adapters().iter().collect();
    Ok(merge_factors(&refs, weights))
}

/// [`merge_lowrank`] over an explicit list of same-layout adapters; shapes are
/// the caller's responsibility.
pub fn merge_factors(adapters: &[&LoraAdapter], weights: &SimplexWeights) -> LoraAdapter {
    let first = adapters[0];
    let merged = (0..first.sites.len())
        .map(|s| {
            let lam = weights.row_for_layer(SiteId::from_index(s).layer);
            let a: Vec<&Matrix> = adapters.iter().map(|e| &e.sites[s].a).collect();
            let b: Vec<&Matrix> = adapters.iter().map(|e| &e.sites[s].b).collect();
            SiteFactors {
                a: mix(&a, lam),
                b: mix(&b, lam),
            }
        })
        .collect();
    LoraAdapter {
        sites: merged,
        rank: first.rank,
        alpha: first.alpha,
        fingerprint: first.fingerprint,
        task: None,
    }
}

/// Product-space merge: `ΔW* = Σ λ_i s·A_i B_i` at every site.
pub fn merge_fullrank(library: &ExpertLibrary, weights: &SimplexWeights) -> Result<DenseDelta> {
    let sites = check(library, weights)?;
    let deltas: Vec<DenseDelta> = library.adapters().iter().map(DenseDelta::from_adapter).collect();
    let merged = (0..sites)
        .map(|s| {
            let lam = weights.row_for_layer(SiteId::from_index(s).layer);
            let d: Vec<&Matrix> = deltas.iter().map(|e| &e.sites[s]).collect();
            mix(&d, lam)
        })
        .collect();
    Ok(DenseDelta {
        sites: merged,
        fingerprint: library.fingerprint(),
    })
}
