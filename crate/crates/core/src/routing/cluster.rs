//! Hierarchical-cluster routing: experts are merged within clusters with learned
//! input-independent coefficients, and a router mixes the cluster adapters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::cluster::ClusterAssignment;
use crate::error::{Error, Result};
use crate::expert::{ExpertLibrary, LoraAdapter};
use crate::fusion::fit::{logits_grad, merge_lambda_grad};
use crate::fusion::{mean_loss, merge_factors, SimplexLogits, WeightMode};
use crate::lm::{AdapterRef, BaseLm, Example, GradSink};
use crate::numerics::{Matrix, Params, Rng};
use crate::routing::arrow::arrow_from_adapters;
use crate::routing::router::{Router, ScoreMode};
use crate::train::{example_loss_grad, fit, FitOutcome, Objective, TrainHyper};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HcInit {
    /// Zero router with plain scores.
    #[default]
    Plain,
    /// Arrow rows of the uniformly merged cluster adapters, absolute scores.
    Arrow,
}

/// Trainable state of cluster routing.
#[derive(Clone, Debug, PartialEq)]
pub struct HcParams {
    /// One global coefficient row per cluster, over its members in expert order.
    pub weights: Vec<SimplexLogits>,
    /// `K` rows per site.
    pub router: Router,
}

impl Params for HcParams {
    fn blocks(&self) -> Vec<&[f64]> {
        let mut b: Vec<&[f64]> = self.weights.iter().map(|w| w.logits.data()).collect();
        b.extend(self.router.blocks());
        b
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut b: Vec<&mut [f64]> = self.weights.iter_mut().map(|w| w.logits.data_mut()).collect();
        b.extend(self.router.blocks_mut());
        b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterRouting {
    pub clusters: ClusterAssignment,
    pub params: HcParams,
}

fn members_of<'a>(library: &'a ExpertLibrary, members: &[usize]) -> Vec<&'a LoraAdapter> {
    members.iter().map(|&i| library.get(i)).collect()
}

/// Merged adapter of every cluster under the current coefficients.
pub fn cluster_adapters(library: &ExpertLibrary, clusters: &ClusterAssignment, params: &HcParams) -> Result<Vec<LoraAdapter>> {
    if clusters.assignment.len() != library.len() {
        return Err(Error::Shape(format!(
            "cluster assignment covers {} experts, library has {}",
            clusters.assignment.len(),
            library.len()
        )));
    }
    clusters
        .clusters()
        .iter()
        .zip(&params.weights)
        .map(|(m, w)| Ok(merge_factors(&members_of(library, m), &w.weights()?)))
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HcJson {
    clusters: ClusterAssignment,
    logits: Vec<Matrix>,
}

impl ClusterRouting {
    /// Writes `router.afl` (+ sidecar) and `hc.json` into `dir`.
    pub fn save(&self, dir: &Path, fingerprint: u64) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.params.router.save(&dir.join("router.afl"), fingerprint)?;
        let j = HcJson {
            clusters: self.clusters.clone(),
            logits: self.params.weights.iter().map(|w| w.logits.clone()).collect(),
        };
        std::fs::write(dir.join("hc.json"), serde_json::to_string_pretty(&j)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (router, _) = Router::load(&dir.join("router.afl"))?;
        let path = dir.join("hc.json");
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => e.into(),
        })?;
        let j: HcJson = serde_json::from_str(&text)?;
        if j.logits.len() != j.clusters.k || router.num_experts() != j.clusters.k {
            return Err(Error::Shape("cluster routing files disagree on the cluster count".into()));
        }
        let weights = j
            .logits
            .into_iter()
            .map(|logits| SimplexLogits { mode: WeightMode::Global, logits })
            .collect();
        Ok(Self {
            clusters: j.clusters,
            params: HcParams { weights, router },
        })
    }

    pub fn cluster_adapters(&self, library: &ExpertLibrary) -> Result<Vec<LoraAdapter>> {
        cluster_adapters(library, &self.clusters, &self.params)
    }

    /// Uniform within-cluster coefficients and an initial router.
    pub fn initial(base: &BaseLm, library: &ExpertLibrary, clusters: ClusterAssignment, init: HcInit) -> Result<Self> {
        let weights: Vec<SimplexLogits> = clusters
            .clusters()
            .iter()
            .map(|m| SimplexLogits::zeros(m.len(), WeightMode::Global, 1))
            .collect();
        let router = match init {
            HcInit::Plain => Router::zeros(base.num_sites(), clusters.k, base.config.width, ScoreMode::Plain),
            HcInit::Arrow => {
                let probe = HcParams {
                    weights: weights.clone(),
                    router: Router::zeros(0, 0, 0, ScoreMode::Plain),
                };
                let merged = cluster_adapters(library, &clusters, &probe)?;
                let names: Vec<String> = (0..clusters.k).map(|c| format!("cluster{c}")).collect();
                arrow_from_adapters(&merged, &names)?
            }
        };
        Ok(Self {
            clusters,
            params: HcParams { weights, router },
        })
    }
}

/// Cross-entropy of the cluster-routed model, trained jointly over coefficients
/// and router.
pub struct HcObjective<'a> {
    pub base: &'a BaseLm,
    pub library: &'a ExpertLibrary,
    pub clusters: &'a ClusterAssignment,
    pub train: &'a [Example],
    pub val: &'a [Example],
}

impl<'a> HcObjective<'a> {
    fn mean(&self, params: &HcParams, data: &[Example]) -> Result<f64> {
        let experts = cluster_adapters(self.library, self.clusters, params)?;
        mean_loss(self.base, AdapterRef::Routed { experts: &experts, router: &params.router }, data)
    }
}

impl<'a> Objective for HcObjective<'a> {
    type Params = HcParams;

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn loss_grad(&self, params: &HcParams, idx: &[usize], _rng: &mut Rng) -> Result<(f64, usize, HcParams)> {
        let experts = cluster_adapters(self.library, self.clusters, params)?;
        let adapter = AdapterRef::Routed {
            experts: &experts,
            router: &params.router,
        };
        let mut grouter = params.router.zeroed();
        let mut gexp: Vec<LoraAdapter> = experts.iter().map(|e| e.zeroed()).collect();
        let (mut total, mut count) = (0.0, 0usize);
        for &i in idx {
            let (l, c, tape, dlogits) = example_loss_grad(self.base, adapter, &self.train[i], None, None)?;
            self.base.backward(
                &tape,
                adapter,
                &dlogits,
                &mut GradSink {
                    router: Some(&mut grouter),
                    experts: Some(&mut gexp),
                    ..Default::default()
                },
            )?;
            total += l;
            count += c;
        }
        let weights = self
            .clusters
            .clusters()
            .iter()
            .zip(&params.weights)
            .zip(&gexp)
            .map(|((m, w), g)| {
                let sw = w.weights()?;
                let dlam = merge_lambda_grad(&members_of(self.library, m), WeightMode::Global, 1, g);
                Ok(logits_grad(&sw, &dlam))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((total, count, HcParams { weights, router: grouter }))
    }

    fn train_loss(&self, params: &HcParams) -> Result<f64> {
        self.mean(params, self.train)
    }

    fn val_loss(&self, params: &HcParams) -> Result<f64> {
        self.mean(params, self.val)
    }
}

/// Trains cluster routing over a given clustering.
#[allow(clippy::too_many_arguments)]
pub fn build_hc_routing(
    base: &BaseLm,
    library: &ExpertLibrary,
    clusters: ClusterAssignment,
    train: &[Example],
    val: &[Example],
    init: HcInit,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(ClusterRouting, FitOutcome<HcParams>)> {
    library.check_compatible(base)?;
    let start = ClusterRouting::initial(base, library, clusters, init)?;
    let obj = HcObjective {
        base,
        library,
        clusters: &start.clusters,
        train,
        val,
    };
    let out = fit(&obj, &start.params, hyper, seed)?;
    Ok((
        ClusterRouting {
            clusters: start.clusters.clone(),
            params: out.params.clone(),
        },
        out,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::MergeObjective;
    use crate::lm::LmConfig;
    use crate::numerics::{finite_diff_grad, relative_error, Matrix};
    use crate::routing::fit::RouterObjective;

    fn small() -> (BaseLm, ExpertLibrary, Vec<Example>) {
        let base = BaseLm::build(
            LmConfig { vocab: 10, width: 8, layers: 2, heads: 2, ffn: 8, max_len: 12 },
            &mut Rng::new(3),
        )
        .unwrap();
        let mut rng = Rng::new(4);
        let lib = ExpertLibrary::new(
            (0..4)
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

    fn randomize(p: &mut HcParams, seed: u64) {
        let mut rng = Rng::new(seed);
        for v in p.blocks_mut().into_iter().flatten() {
            *v = rng.normal();
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (base, lib, data) = small();
        let clusters = ClusterAssignment {
            assignment: vec![0, 1, 0, 1],
            k: 2,
            trace: Vec::new(),
        };
        for init in [HcInit::Plain, HcInit::Arrow] {
            let mut start = ClusterRouting::initial(&base, &lib, clusters.clone(), init).unwrap();
            randomize(&mut start.params, 12);
            let obj = HcObjective { base: &base, library: &lib, clusters: &clusters, train: &data, val: &data };
            let (_, g) = obj.mean_loss_grad(&start.params, &[0, 1]).unwrap();
            let fd = finite_diff_grad(
                |x| {
                    let mut q = start.params.clone();
                    q.set_flat(x).unwrap();
                    obj.mean_loss_grad(&q, &[0, 1]).unwrap().0
                },
                &start.params.flat(),
            )
            .unwrap();
            assert!(relative_error(&g.flat(), &fd) < 1e-4);
        }
    }

    #[test]
    fn one_cluster_is_learned_merging() {
        let (base, lib, data) = small();
        let clusters = ClusterAssignment { assignment: vec![0; 4], k: 1, trace: Vec::new() };
        let mut start = ClusterRouting::initial(&base, &lib, clusters.clone(), HcInit::Plain).unwrap();
        randomize(&mut start.params, 2);
        let hc = HcObjective { base: &base, library: &lib, clusters: &clusters, train: &data, val: &data };
        let merge = MergeObjective { base: &base, library: &lib, train: &data, val: &data };
        let a = hc.train_loss(&start.params).unwrap();
        let b = merge.train_loss(&start.params.weights[0]).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn singleton_clusters_are_plain_routing() {
        let (base, lib, data) = small();
        let clusters = ClusterAssignment::singletons(4);
        let mut start = ClusterRouting::initial(&base, &lib, clusters.clone(), HcInit::Plain).unwrap();
        let mut rng = Rng::new(6);
        for m in &mut start.params.router.sites {
            *m = Matrix::from_fn(4, 8, |_, _| rng.normal());
        }
        let hc = HcObjective { base: &base, library: &lib, clusters: &clusters, train: &data, val: &data };
        let ro = RouterObjective { base: &base, experts: lib.adapters(), train: &data, val: &data };
        assert_eq!(hc.train_loss(&start.params).unwrap(), ro.train_loss(&start.params.router).unwrap());
    }
}
