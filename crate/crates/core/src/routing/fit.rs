use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt::{FileKind, TensorFile};
use crate::error::{Error, Result};
use crate::expert::{ExpertLibrary, LoraAdapter};
use crate::fusion::mean_loss;
use crate::lm::{AdapterRef, BaseLm, Example, GradSink};
use crate::numerics::{Params, Rng};
use crate::routing::arrow::arrow_init;
use crate::routing::router::{Router, RouterInit, ScoreMode};
use crate::train::{example_loss_grad, fit, FitOutcome, Objective, TrainHyper};

/// Cross-entropy of the routed model as a function of the router.
pub struct RouterObjective<'a> {
    pub base: &'a BaseLm,
    pub experts: &'a [LoraAdapter],
    pub train: &'a [Example],
    pub val: &'a [Example],
}

impl<'a> Objective for RouterObjective<'a> {
    type Params = Router;

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn loss_grad(&self, params: &Router, idx: &[usize], _rng: &mut Rng) -> Result<(f64, usize, Router)> {
        let adapter = AdapterRef::Routed {
            experts: self.experts,
            router: params,
        };
        let mut grad = params.zeroed();
        let (mut total, mut count) = (0.0, 0usize);
        for &i in idx {
            let (l, c, tape, dlogits) = example_loss_grad(self.base, adapter, &self.train[i], None, None)?;
            self.base.backward(
                &tape,
                adapter,
                &dlogits,
                &mut GradSink {
                    router: Some(&mut grad),
                    ..Default::default()
                },
            )?;
            total += l;
            count += c;
        }
        Ok((total, count, grad))
    }

    fn train_loss(&self, params: &Router) -> Result<f64> {
        mean_loss(self.base, AdapterRef::Routed { experts: self.experts, router: params }, self.train)
    }

    fn val_loss(&self, params: &Router) -> Result<f64> {
        mean_loss(self.base, AdapterRef::Routed { experts: self.experts, router: params }, self.val)
    }
}

/// Trains a per-site linear router. A zero start uses plain scores; an Arrow start
/// keeps absolute scores. The result routes over all experts.
pub fn fit_router(
    base: &BaseLm,
    library: &ExpertLibrary,
    train: &[Example],
    val: &[Example],
    init: RouterInit,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(Router, FitOutcome<Router>)> {
    library.check_compatible(base)?;
    let start = match init {
        RouterInit::Zero => Router::zeros(base.num_sites(), library.len(), base.config.width, ScoreMode::Plain),
        RouterInit::Arrow => arrow_init(library)?,
    };
    let obj = RouterObjective {
        base,
        experts: library.adapters(),
        train,
        val,
    };
    let out = fit(&obj, &start, hyper, seed)?;
    Ok((out.params.clone().with_top_k(None), out))
}

/// `loss(top-k_small) − loss(top-k_large)` for the same router.
pub fn calibration_delta(
    base: &BaseLm,
    experts: &[LoraAdapter],
    router: &Router,
    data: &[Example],
    k_small: usize,
    k_large: usize,
) -> Result<f64> {
    let n = experts.len();
    if k_small == 0 || k_small > k_large || k_large > n {
        return Err(Error::Invalid(format!("need 1 ≤ k_small ≤ k_large ≤ {n}")));
    }
    let loss = |k: usize| {
        let r = router.clone().with_top_k(Some(k));
        mean_loss(base, AdapterRef::Routed { experts, router: &r }, data)
    };
    Ok(loss(k_small)? - loss(k_large)?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RouterSidecar {
    mode: ScoreMode,
    top_k: Option<usize>,
    init: RouterInit,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

impl Router {
    /// Writes the matrices to `path` and `{mode, top_k, init}` next to it as JSON.
    pub fn save(&self, path: &Path, fingerprint: u64) -> Result<()> {
        let (experts, width) = self.sites.first().map_or((0, 0), |m| m.shape());
        let file = TensorFile {
            kind: FileKind::Router,
            dims: vec![self.sites.len() as u64, experts as u64, width as u64],
            scalars: Vec::new(),
            fingerprint,
            tensors: self
                .sites
                .iter()
                .enumerate()
                .map(|(s, m)| (format!("site{s}"), m.clone()))
                .collect(),
        };
        file.write(path)?;
        let side = RouterSidecar {
            mode: self.score,
            top_k: self.top_k,
            init: self.init,
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    /// Returns the router and the base fingerprint it was saved with.
    pub fn load(path: &Path) -> Result<(Router, u64)> {
        let file = TensorFile::read(path)?;
        file.expect_kind(FileKind::Router)?;
        let nsites = *file
            .dims
            .first()
            .ok_or_else(|| Error::Invalid("router header lacks dims".into()))? as usize;
        let sites = (0..nsites)
            .map(|s| file.tensor(&format!("site{s}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        let sp = sidecar_path(path);
        let text = std::fs::read_to_string(&sp).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(sp.clone()),
            _ => e.into(),
        })?;
        let side: RouterSidecar = serde_json::from_str(&text)?;
        Ok((
            Router {
                sites,
                score: side.mode,
                top_k: side.top_k,
                init: side.init,
            },
            file.fingerprint,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;
    use crate::numerics::{finite_diff_grad, relative_error, Matrix};

    fn small() -> (BaseLm, ExpertLibrary, Vec<Example>) {
        let base = BaseLm::build(
            LmConfig { vocab: 10, width: 8, layers: 2, heads: 2, ffn: 8, max_len: 12 },
            &mut Rng::new(3),
        )
        .unwrap();
        let mut rng = Rng::new(4);
        let lib = ExpertLibrary::new(
            (0..3)
                .map(|i| {
                    let mut a = LoraAdapter::zeros(&base, 2, 4.0).unwrap();
                    for v in a.blocks_mut().into_iter().flatten() {
                        *v = 0.3 * rng.normal();
                    }
                    (format!("e{i}"), a)
                })
                .collect(),
        )
        .unwrap();
        let data = vec![
            Example::new(vec![2, 3, 4], vec![4, 3, 2]),
            Example::new(vec![5, 6], vec![7, 8]),
        ];
        (base, lib, data)
    }

    #[test]
    fn router_gradient_matches_finite_differences() {
        let (base, lib, data) = small();
        let obj = RouterObjective { base: &base, experts: lib.adapters(), train: &data, val: &data };
        let mut rng = Rng::new(9);
        for score in [ScoreMode::Plain, ScoreMode::Absolute] {
            let mut r = Router::zeros(base.num_sites(), 3, 8, score);
            for m in &mut r.sites {
                *m = Matrix::from_fn(3, 8, |_, _| rng.normal());
            }
            let (_, g) = obj.mean_loss_grad(&r, &[0, 1]).unwrap();
            let fd = finite_diff_grad(
                |x| {
                    let mut q = r.clone();
                    q.set_flat(x).unwrap();
                    obj.mean_loss_grad(&q, &[0, 1]).unwrap().0
                },
                &r.flat(),
            )
            .unwrap();
            assert!(relative_error(&g.flat(), &fd) < 1e-4);
        }
    }

    #[test]
    fn identical_experts_flat_objective() {
        let (base, lib, data) = small();
        let e = lib.get(0).clone();
        let same = ExpertLibrary::new(vec![("a".into(), e.clone()), ("b".into(), e)]).unwrap();
        let hyper = TrainHyper { epochs: 2, lr_grid: vec![1e-1], batch_size: 1, ..TrainHyper::default() };
        let (_, out) = fit_router(&base, &same, &data, &data, RouterInit::Zero, &hyper, 0).unwrap();
        let s0 = out.step_losses.clone();
        assert!((out.initial_train_loss - out.final_train_loss).abs() < 1e-12);
        assert!(s0.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn calibration_same_k_is_zero() {
        let (base, lib, data) = small();
        let r = arrow_init(&lib).unwrap();
        assert_eq!(calibration_delta(&base, lib.adapters(), &r, &data, 3, 3).unwrap(), 0.0);
        assert!(calibration_delta(&base, lib.adapters(), &r, &data, 2, 1).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let (base, lib, _) = small();
        let r = arrow_init(&lib).unwrap().with_top_k(Some(2));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("router.afl");
        r.save(&p, base.fingerprint()).unwrap();
        let (back, fp) = Router::load(&p).unwrap();
        assert_eq!(back, r);
        assert_eq!(fp, base.fingerprint());
    }
}
