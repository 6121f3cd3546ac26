use crate::error::{Error, Result};
use crate::expert::{ExpertLibrary, LoraAdapter};
use crate::numerics::{svd_top, Matrix};
use crate::routing::router::{Router, RouterInit, ScoreMode};

/// Leading right singular vector of `A·B` at `site`.
pub fn arrow_row(adapter: &LoraAdapter, site: usize) -> Result<Vec<f64>> {
    let delta = adapter.sites[site].product();
    if delta.frobenius() == 0.0 {
        return Err(Error::ZeroNorm(format!("site {site}")));
    }
    Ok(svd_top(&delta, 1)?.v.col(0))
}

/// Zero-shot router: row `i` at every site is the top right singular vector of
/// expert `i`'s update there. Scores use the absolute value.
pub fn arrow_init(library: &ExpertLibrary) -> Result<Router> {
    arrow_from_adapters(library.adapters(), library.names())
}

pub(crate) fn arrow_from_adapters(adapters: &[LoraAdapter], names: &[String]) -> Result<Router> {
    let first = adapters
        .first()
        .ok_or_else(|| Error::Invalid("Arrow needs at least one expert".into()))?;
    let nsites = first.sites.len();
    let width = first.sites[0].b.cols();
    let mut sites = Vec::with_capacity(nsites);
    for s in 0..nsites {
        let mut w = Matrix::zeros(adapters.len(), width);
        for (i, ad) in adapters.iter().enumerate() {
            let row = arrow_row(ad, s).map_err(|e| match e {
                Error::ZeroNorm(_) => Error::ZeroNorm(format!("expert `{}` has a zero update at site {s}", names[i])),
                other => other,
            })?;
            w.row_mut(i).copy_from_slice(&row);
        }
        sites.push(w);
    }
    Ok(Router {
        sites,
        score: ScoreMode::Absolute,
        top_k: None,
        init: RouterInit::Arrow,
    })
}
