//! Lazily built, cached experiment state shared by `run` and the single-step
//! subcommands.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{
    eval_method, expert_task_matrix, mbc_cluster, oracle_eval, token_mean, ClusterAssignment, EvalReport, Method,
    TaskData,
};
use crate::error::{Error, Result};
use crate::expert::{ExpertLibrary, LoraAdapter};
use crate::fusion::{
    distill, fit_ensemble_weights, fit_merge_weights, lp_minimax_weights, merge_fullrank, merge_lowrank,
    EnsembleLevel, EnsembleSpec, ErrorMatrix, ExpertOutputs, MinimaxSolution, SimplexWeights,
    WeightMode,
};
use crate::harness::cache::{Cache, Cached};
use crate::harness::config::{Basis, ExperimentConfig, MethodName};
use crate::harness::stages::{
    generate_suite, job_seed, mixture, train_base, train_cluster_experts, train_shared_expert, train_task_experts,
    TrainDiag,
};
use crate::harness::tasks::TaskDataset;
use crate::lm::{BaseLm, Example};
use crate::routing::{
    arrow_init, build_hc_routing, calibration_delta, fit_router, ClusterRouting, HcInit, Router, RouterInit,
};

type LibraryMeta = BTreeMap<String, TrainDiag>;

fn lazy<'a, T>(cell: &'a OnceCell<T>, build: impl FnOnce() -> Result<T>) -> Result<&'a T> {
    if let Some(v) = cell.get() {
        return Ok(v);
    }
    let v = build()?;
    Ok(cell.get_or_init(|| v))
}

/// Top-k calibration of an untrained Arrow router against the trained router.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub k_small: usize,
    pub k_large: usize,
    pub arrow: f64,
    pub sgd_routing: f64,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub cache: Cache,
    datasets: OnceCell<Vec<TaskDataset>>,
    base: OnceCell<Cached<BaseLm, TrainDiag>>,
    library: OnceCell<Cached<ExpertLibrary, LibraryMeta>>,
    agnostic: OnceCell<ExpertLibrary>,
    basis: OnceCell<ExpertLibrary>,
    shared: OnceCell<Cached<LoraAdapter, TrainDiag>>,
    clusters: OnceCell<ClusterAssignment>,
    cluster_library: OnceCell<Cached<ExpertLibrary, LibraryMeta>>,
    fusion_train: OnceCell<Vec<Example>>,
    fusion_val: OnceCell<Vec<Example>>,
    sgd_ensemble: OnceCell<Cached<SimplexWeights, TrainDiag>>,
    global_merge: OnceCell<Cached<SimplexWeights, TrainDiag>>,
    layer_merge: OnceCell<Cached<SimplexWeights, TrainDiag>>,
    sgd_router: OnceCell<Cached<Router, TrainDiag>>,
    hc: OnceCell<Cached<ClusterRouting, TrainDiag>>,
    arrow_hc: OnceCell<Cached<ClusterRouting, TrainDiag>>,
    distilled: OnceCell<Cached<LoraAdapter, TrainDiag>>,
    val_matrix: OnceCell<ErrorMatrix>,
    test_matrix: OnceCell<ErrorMatrix>,
    lp: OnceCell<MinimaxSolution>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, cache: Cache) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            cache,
            datasets: OnceCell::new(),
            base: OnceCell::new(),
            library: OnceCell::new(),
            agnostic: OnceCell::new(),
            basis: OnceCell::new(),
            shared: OnceCell::new(),
            clusters: OnceCell::new(),
            cluster_library: OnceCell::new(),
            fusion_train: OnceCell::new(),
            fusion_val: OnceCell::new(),
            sgd_ensemble: OnceCell::new(),
            global_merge: OnceCell::new(),
            layer_merge: OnceCell::new(),
            sgd_router: OnceCell::new(),
            hc: OnceCell::new(),
            arrow_hc: OnceCell::new(),
            distilled: OnceCell::new(),
            val_matrix: OnceCell::new(),
            test_matrix: OnceCell::new(),
            lp: OnceCell::new(),
        })
    }

    fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn datasets(&self) -> Result<&[TaskDataset]> {
        lazy(&self.datasets, || {
            generate_suite(&self.config.tasks, self.seed()).map_err(|e| e.at_step("gen-tasks"))
        })
        .map(Vec::as_slice)
    }

    /// Test split of every task, in suite order.
    pub fn test_tasks(&self) -> Result<Vec<TaskData>> {
        Ok(self
            .datasets()?
            .iter()
            .map(|d| TaskData {
                name: d.spec.name.clone(),
                examples: d.test.clone(),
            })
            .collect())
    }

    /// Full validation split of every task.
    pub fn val_tasks(&self) -> Result<Vec<TaskData>> {
        Ok(self
            .datasets()?
            .iter()
            .map(|d| TaskData {
                name: d.spec.name.clone(),
                examples: d.val.clone(),
            })
            .collect())
    }

    pub fn base(&self) -> Result<&Cached<BaseLm, TrainDiag>> {
        lazy(&self.base, || {
            let c = &self.config;
            let material = json!({
                "artifact": "base",
                "seed": c.seed,
                "model": c.model,
                "base": c.base,
                "tasks": c.tasks,
            });
            let ds = self.datasets()?;
            self.cache
                .get_or_build(
                    "base",
                    &material,
                    |d| BaseLm::load(&d.join("base.afl")),
                    |b, d| b.save(&d.join("base.afl")),
                    || {
                        let train = mixture(ds.iter().map(|d| d.train.as_slice()), c.base.train_per_task, c.seed, "base/train");
                        let val = mixture(ds.iter().map(|d| d.val.as_slice()), c.base.val_per_task, c.seed, "base/val");
                        log::info!("pre-training base on {} examples", train.len());
                        train_base(&c.model, &train, &val, &c.base.train, c.seed)
                    },
                )
                .map_err(|e| e.at_step("train-base"))
        })
    }

    fn expert_material(&self) -> serde_json::Value {
        let e = &self.config.expert;
        json!({
            "rank": e.rank,
            "alpha": e.alpha,
            "dropout": e.dropout,
            "val_per_task": e.val_per_task,
            "train": e.train,
        })
    }

    /// Per-task experts, labelled with their task.
    pub fn library(&self) -> Result<&Cached<ExpertLibrary, LibraryMeta>> {
        lazy(&self.library, || {
            let base = self.base()?;
            let material = json!({
                "artifact": "experts",
                "seed": self.seed(),
                "base": base.key,
                "expert": self.expert_material(),
                "train_per_task": self.config.expert.train_per_task,
                "tasks": self.config.tasks,
            });
            let ds = self.datasets()?;
            self.cache
                .get_or_build("experts", &material, ExpertLibrary::load, |l, d| l.save(d), || {
                    let trained = train_task_experts(&base.value, ds, &self.config.expert, self.seed())?;
                    let meta = trained.iter().map(|(n, _, d)| (n.clone(), d.clone())).collect();
                    let lib = ExpertLibrary::new(trained.into_iter().map(|(n, a, _)| (n, a)).collect())?;
                    Ok((lib, meta))
                })
                .map_err(|e| e.at_step("train-experts"))
        })
    }

    /// The expert library with task labels removed: the only view handed to
    /// task-agnostic methods.
    pub fn agnostic(&self) -> Result<&ExpertLibrary> {
        lazy(&self.agnostic, || Ok(self.library()?.value.without_labels()))
    }

    /// Replaces the experts' task labels (label-leak audits).
    pub fn relabel_experts(&mut self, labels: &[Option<String>]) -> Result<()> {
        let lib = self.library()?.clone();
        if labels.len() != lib.value.len() {
            return Err(Error::Invalid("one label per expert is required".into()));
        }
        let entries = lib
            .value
            .names()
            .iter()
            .zip(lib.value.adapters())
            .zip(labels)
            .map(|((n, a), l)| {
                let mut a = a.clone();
                a.task = l.clone();
                (n.clone(), a)
            })
            .collect();
        let relabelled = Cached {
            value: ExpertLibrary::new(entries)?,
            meta: lib.meta,
            key: lib.key,
        };
        self.library = OnceCell::from(relabelled);
        Ok(())
    }

    pub fn shared(&self) -> Result<&Cached<LoraAdapter, TrainDiag>> {
        lazy(&self.shared, || {
            let base = self.base()?;
            let material = json!({
                "artifact": "shared",
                "seed": self.seed(),
                "base": base.key,
                "expert": self.expert_material(),
                "train_per_task": self.config.expert.shared_train_per_task,
                "tasks": self.config.tasks,
            });
            let ds = self.datasets()?;
            self.cache
                .get_or_build(
                    "shared",
                    &material,
                    |d| LoraAdapter::load(&d.join("adapter.afl")),
                    |a, d| a.save(&d.join("adapter.afl")),
                    || {
                        log::info!("training shared expert");
                        train_shared_expert(&base.value, ds, &self.config.expert, self.seed())
                    },
                )
                .map_err(|e| e.at_step("train-shared"))
        })
    }

    /// Experts grouped by parameter similarity (no task labels involved).
    pub fn clusters(&self) -> Result<&ClusterAssignment> {
        lazy(&self.clusters, || {
            let a = &self.config.analysis;
            mbc_cluster(self.agnostic()?, a.clusters, a.cosine_basis).map_err(|e| e.at_step("cluster"))
        })
    }

    /// One retrained expert per cluster.
    pub fn cluster_library(&self) -> Result<&Cached<ExpertLibrary, LibraryMeta>> {
        lazy(&self.cluster_library, || {
            let base = self.base()?;
            let clusters = self.clusters()?;
            let material = json!({
                "artifact": "cluster-experts",
                "seed": self.seed(),
                "base": base.key,
                "experts": self.library()?.key,
                "assignment": clusters.assignment,
                "expert": self.expert_material(),
                "cluster_train": self.config.expert.cluster_train,
                "tasks": self.config.tasks,
            });
            let ds = self.datasets()?;
            self.cache
                .get_or_build("cluster-experts", &material, ExpertLibrary::load, |l, d| l.save(d), || {
                    let trained =
                        train_cluster_experts(&base.value, ds, &clusters.clusters(), &self.config.expert, self.seed())?;
                    let meta = trained.iter().map(|(n, _, d)| (n.clone(), d.clone())).collect();
                    let lib = ExpertLibrary::new(trained.into_iter().map(|(n, a, _)| (n, a)).collect())?;
                    Ok((lib, meta))
                })
                .map_err(|e| e.at_step("train-cluster-experts"))
        })
    }

    /// Unlabelled experts combined by the ensembling, merging and routing methods.
    pub fn basis(&self) -> Result<&ExpertLibrary> {
        match self.config.fusion.basis {
            Basis::Private => self.agnostic(),
            Basis::Clusters => lazy(&self.basis, || Ok(self.cluster_library()?.value.without_labels())),
        }
    }

    fn basis_key(&self) -> Result<String> {
        Ok(match self.config.fusion.basis {
            Basis::Private => self.library()?.key.clone(),
            Basis::Clusters => self.cluster_library()?.key.clone(),
        })
    }

    /// Task mixture for coefficient and router training.
    pub fn fusion_train(&self) -> Result<&[Example]> {
        lazy(&self.fusion_train, || {
            let ds = self.datasets()?;
            Ok(mixture(ds.iter().map(|d| d.train.as_slice()), self.config.fusion.train_per_task, self.seed(), "fusion/train"))
        })
        .map(Vec::as_slice)
    }

    pub fn fusion_val(&self) -> Result<&[Example]> {
        lazy(&self.fusion_val, || {
            let ds = self.datasets()?;
            Ok(mixture(ds.iter().map(|d| d.val.as_slice()), self.config.fusion.val_per_task, self.seed(), "fusion/val"))
        })
        .map(Vec::as_slice)
    }

    fn fusion_material(&self, artifact: &str) -> Result<serde_json::Value> {
        Ok(json!({
            "artifact": artifact,
            "seed": self.seed(),
            "experts": self.basis_key()?,
            "fusion": self.config.fusion,
            "tasks": self.config.tasks,
        }))
    }

    fn cached_weights<'a>(
        &'a self,
        cell: &'a OnceCell<Cached<SimplexWeights, TrainDiag>>,
        artifact: &str,
        build: impl FnOnce() -> Result<(SimplexWeights, TrainDiag)>,
    ) -> Result<&'a Cached<SimplexWeights, TrainDiag>> {
        let material = self.fusion_material(artifact)?;
        lazy(cell, || {
            self.cache
                .get_or_build(
                    artifact,
                    &material,
                    |d| SimplexWeights::load(&d.join("weights.json")),
                    |w, d| w.save(&d.join("weights.json")),
                    || {
                        log::info!("fitting {artifact}");
                        build()
                    },
                )
                .map_err(|e| e.at_step(artifact))
        })
    }

    pub fn uniform_ensemble(&self, level: EnsembleLevel) -> Result<EnsembleSpec> {
        EnsembleSpec::new(SimplexWeights::uniform(self.basis()?.len(), WeightMode::Global, 1)?, level)
    }

    pub fn sgd_ensemble(&self) -> Result<EnsembleSpec> {
        let f = &self.config.fusion;
        let c = self.cached_weights(&self.sgd_ensemble, "sgd-ensemble", || {
            let base = &self.base()?.value;
            let lib = self.basis()?;
            let train = ExpertOutputs::compute(base, lib, self.fusion_train()?)?;
            let val = ExpertOutputs::compute(base, lib, self.fusion_val()?)?;
            let (spec, out) = fit_ensemble_weights(
                &train,
                &val,
                f.ensemble_level,
                f.l1,
                &f.train,
                job_seed(self.seed(), "fusion/sgd-ensemble"),
            )?;
            Ok((spec.weights, TrainDiag::from_outcome(&out)))
        })?;
        EnsembleSpec::new(c.value.clone(), f.ensemble_level)
    }

    pub fn sgd_merge(&self, mode: WeightMode) -> Result<&SimplexWeights> {
        let (cell, artifact) = match mode {
            WeightMode::Global => (&self.global_merge, "global-sgd-merge"),
            WeightMode::PerLayer => (&self.layer_merge, "layer-sgd-merge"),
        };
        let c = self.cached_weights(cell, artifact, || {
            let (w, out) = fit_merge_weights(
                &self.base()?.value,
                self.basis()?,
                self.fusion_train()?,
                self.fusion_val()?,
                mode,
                &self.config.fusion.train,
                job_seed(self.seed(), &format!("fusion/{artifact}")),
            )?;
            Ok((w, TrainDiag::from_outcome(&out)))
        })?;
        Ok(&c.value)
    }

    /// Learned router over the private experts, trained from zero.
    pub fn sgd_router(&self) -> Result<&Router> {
        let material = self.fusion_material("sgd-routing")?;
        let c = lazy(&self.sgd_router, || {
            let base = self.base()?;
            let fp = base.value.fingerprint();
            self.cache
                .get_or_build(
                    "sgd-routing",
                    &material,
                    |d| Router::load(&d.join("router.afl")).map(|r| r.0),
                    |r, d| r.save(&d.join("router.afl"), fp),
                    || {
                        log::info!("fitting sgd-routing");
                        let (r, out) = fit_router(
                            &base.value,
                            self.basis()?,
                            self.fusion_train()?,
                            self.fusion_val()?,
                            RouterInit::Zero,
                            &self.config.fusion.train,
                            job_seed(self.seed(), "fusion/sgd-routing"),
                        )?;
                        Ok((r, TrainDiag::from_outcome(&out)))
                    },
                )
                .map_err(|e| e.at_step("sgd-routing"))
        })?;
        Ok(&c.value)
    }

    /// Zero-shot Arrow router over the private experts.
    pub fn arrow_router(&self) -> Result<Router> {
        arrow_init(self.basis()?).map_err(|e| e.at_step("arrow-init"))
    }

    pub fn hc(&self, init: HcInit) -> Result<&ClusterRouting> {
        let (cell, artifact) = match init {
            HcInit::Plain => (&self.hc, "hc"),
            HcInit::Arrow => (&self.arrow_hc, "arrow-hc"),
        };
        let mut material = self.fusion_material(artifact)?;
        material["experts"] = json!(self.library()?.key);
        material["assignment"] = json!(self.clusters()?.assignment);
        let c = lazy(cell, || {
            let base = self.base()?;
            let fp = base.value.fingerprint();
            self.cache
                .get_or_build(
                    artifact,
                    &material,
                    ClusterRouting::load,
                    |h, d| h.save(d, fp),
                    || {
                        log::info!("fitting {artifact}");
                        let (h, out) = build_hc_routing(
                            &base.value,
                            self.agnostic()?,
                            self.clusters()?.clone(),
                            self.fusion_train()?,
                            self.fusion_val()?,
                            init,
                            &self.config.fusion.train,
                            job_seed(self.seed(), &format!("fusion/{artifact}")),
                        )?;
                        Ok((h, TrainDiag::from_outcome(&out)))
                    },
                )
                .map_err(|e| e.at_step(artifact))
        })?;
        Ok(&c.value)
    }

    /// The better of the uniform and learned ensembles on the fusion validation mixture.
    pub fn distill_teacher(&self) -> Result<(EnsembleSpec, &'static str)> {
        let base = &self.base()?.value;
        let lib = self.basis()?;
        let val = self.fusion_val()?;
        let uniform = self.uniform_ensemble(self.config.fusion.ensemble_level)?;
        let learned = self.sgd_ensemble()?;
        let lu = token_mean(base, Method::Ensemble { library: lib, spec: &uniform }, val)?;
        let ll = token_mean(base, Method::Ensemble { library: lib, spec: &learned }, val)?;
        Ok(if ll < lu { (learned, "sgd-ensemble") } else { (uniform, "uniform-ensemble") })
    }

    pub fn distilled(&self) -> Result<&LoraAdapter> {
        let material = self.fusion_material("distilled-ensemble")?;
        let c = lazy(&self.distilled, || {
            self.cache
                .get_or_build(
                    "distilled-ensemble",
                    &material,
                    |d| LoraAdapter::load(&d.join("adapter.afl")),
                    |a, d| a.save(&d.join("adapter.afl")),
                    || {
                        let (teacher, which) = self.distill_teacher()?;
                        log::info!("distilling {which} into one adapter");
                        let base = &self.base()?.value;
                        let out = distill(
                            base,
                            self.basis()?,
                            &teacher,
                            self.fusion_train()?,
                            self.fusion_val()?,
                            self.config.expert.dropout,
                            &self.config.fusion.train,
                            job_seed(self.seed(), "fusion/distill"),
                        )?;
                        let diag = TrainDiag::from_outcome(&out.fit)
                            .with("initial_kl", out.initial_kl)
                            .with("final_kl", out.final_kl)
                            .with("teacher_is_learned", f64::from(u8::from(which == "sgd-ensemble")));
                        Ok((out.student, diag))
                    },
                )
                .map_err(|e| e.at_step("distill"))
        })?;
        Ok(&c.value)
    }

    /// Expert-by-task validation losses.
    pub fn val_matrix(&self) -> Result<&ErrorMatrix> {
        lazy(&self.val_matrix, || {
            expert_task_matrix(&self.base()?.value, self.agnostic()?, &self.val_tasks()?)
                .map_err(|e| e.at_step("expert-task-matrix"))
        })
    }

    pub fn test_matrix(&self) -> Result<&ErrorMatrix> {
        lazy(&self.test_matrix, || {
            expert_task_matrix(&self.base()?.value, self.agnostic()?, &self.test_tasks()?)
                .map_err(|e| e.at_step("expert-task-matrix"))
        })
    }

    /// Minimax ensemble weights from the validation matrix.
    pub fn lp(&self) -> Result<&MinimaxSolution> {
        lazy(&self.lp, || lp_minimax_weights(self.val_matrix()?).map_err(|e| e.at_step("lp-weights")))
    }

    /// Index of the expert carrying each task's label.
    pub fn oracle_mapping(&self) -> Result<Vec<usize>> {
        let lib = &self.library()?.value;
        self.datasets()?
            .iter()
            .map(|d| {
                lib.index_of_task(&d.spec.name)
                    .ok_or_else(|| Error::Invalid(format!("no expert is labelled with task `{}`", d.spec.name)))
            })
            .collect()
    }

    /// Cluster of each task's own expert.
    pub fn cluster_mapping(&self) -> Result<Vec<usize>> {
        let clusters = self.clusters()?;
        Ok(self.oracle_mapping()?.into_iter().map(|i| clusters.assignment[i]).collect())
    }

    /// Top-1 versus top-all delta of the Arrow and trained routers on the test mixture.
    pub fn calibration(&self) -> Result<Calibration> {
        let base = &self.base()?.value;
        let experts = self.basis()?.adapters();
        let n = experts.len();
        let k_small = self.config.analysis.calibration_k;
        let data: Vec<Example> = self.datasets()?.iter().flat_map(|d| d.test.iter().cloned()).collect();
        let arrow = calibration_delta(base, experts, &self.arrow_router()?, &data, k_small, n)?;
        let sgd = calibration_delta(base, experts, self.sgd_router()?, &data, k_small, n)?;
        Ok(Calibration {
            k_small,
            k_large: n,
            arrow,
            sgd_routing: sgd,
        })
    }

    /// Test-split evaluation of one method.
    pub fn evaluate(&self, method: MethodName) -> Result<EvalReport> {
        let label = method.as_str();
        let tasks = self.test_tasks()?;
        let base = &self.base()?.value;
        let step = format!("eval {label}");
        let run = || -> Result<EvalReport> {
            match method {
                MethodName::Oracle => {
                    oracle_eval(base, label, self.library()?.value.adapters(), &tasks, &self.oracle_mapping()?)
                }
                MethodName::SharedExpert => eval_method(base, label, Method::Adapter(&self.shared()?.value), &tasks),
                MethodName::UniformEnsemble | MethodName::UniformEnsembleLogit => {
                    let level = if method == MethodName::UniformEnsemble {
                        EnsembleLevel::Probability
                    } else {
                        EnsembleLevel::Logit
                    };
                    let spec = self.uniform_ensemble(level)?;
                    eval_method(base, label, Method::Ensemble { library: self.basis()?, spec: &spec }, &tasks)
                }
                MethodName::SgdEnsemble => {
                    let spec = self.sgd_ensemble()?;
                    eval_method(base, label, Method::Ensemble { library: self.basis()?, spec: &spec }, &tasks)
                }
                MethodName::LpEnsemble => {
                    let spec = EnsembleSpec::new(SimplexWeights::global(&self.lp()?.lambda)?, EnsembleLevel::Probability)?;
                    eval_method(base, label, Method::Ensemble { library: self.agnostic()?, spec: &spec }, &tasks)
                }
                MethodName::DistilledEnsemble => eval_method(base, label, Method::Adapter(self.distilled()?), &tasks),
                MethodName::UniformMerge => {
                    let lib = self.basis()?;
                    let m = merge_lowrank(lib, &SimplexWeights::uniform(lib.len(), WeightMode::Global, 1)?)?;
                    eval_method(base, label, Method::Adapter(&m), &tasks)
                }
                MethodName::UniformMergeFullrank => {
                    let lib = self.basis()?;
                    let d = merge_fullrank(lib, &SimplexWeights::uniform(lib.len(), WeightMode::Global, 1)?)?;
                    eval_method(base, label, Method::Dense(&d), &tasks)
                }
                MethodName::GlobalSgdMerge | MethodName::LayerSgdMerge => {
                    let mode = if method == MethodName::GlobalSgdMerge {
                        WeightMode::Global
                    } else {
                        WeightMode::PerLayer
                    };
                    let m = merge_lowrank(self.basis()?, self.sgd_merge(mode)?)?;
                    eval_method(base, label, Method::Adapter(&m), &tasks)
                }
                MethodName::ArrowTopk => {
                    let lib = self.basis()?;
                    let k = self.config.analysis.arrow_top_k.min(lib.len());
                    let router = self.arrow_router()?.with_top_k(Some(k));
                    eval_method(base, label, Method::Routed { experts: lib.adapters(), router: &router }, &tasks)
                }
                MethodName::SgdRouting => {
                    let router = self.sgd_router()?;
                    eval_method(base, label, Method::Routed { experts: self.basis()?.adapters(), router }, &tasks)
                }
                MethodName::Hc | MethodName::ArrowHc => {
                    let init = if method == MethodName::Hc { HcInit::Plain } else { HcInit::Arrow };
                    let hc = self.hc(init)?;
                    let experts = hc.cluster_adapters(self.agnostic()?)?;
                    eval_method(base, label, Method::Routed { experts: &experts, router: &hc.params.router }, &tasks)
                }
                MethodName::MbcOracle => {
                    let lib = &self.cluster_library()?.value;
                    oracle_eval(base, label, lib.adapters(), &tasks, &self.cluster_mapping()?)
                }
                MethodName::MbcArrow => {
                    let lib = &self.cluster_library()?.value;
                    let k = self.config.analysis.arrow_top_k.min(lib.len());
                    let router = arrow_init(lib)?.with_top_k(Some(k));
                    eval_method(base, label, Method::Routed { experts: lib.adapters(), router: &router }, &tasks)
                }
                MethodName::MbcUniformEnsemble => {
                    let lib = &self.cluster_library()?.value;
                    let spec = EnsembleSpec::new(
                        SimplexWeights::uniform(lib.len(), WeightMode::Global, 1)?,
                        EnsembleLevel::Probability,
                    )?;
                    eval_method(base, label, Method::Ensemble { library: lib, spec: &spec }, &tasks)
                }
                MethodName::MbcUniformMerge => {
                    let lib = &self.cluster_library()?.value;
                    let m = merge_lowrank(lib, &SimplexWeights::uniform(lib.len(), WeightMode::Global, 1)?)?;
                    eval_method(base, label, Method::Adapter(&m), &tasks)
                }
            }
        };
        run().map_err(|e| match e {
            Error::Step { .. } => e,
            other => other.at_step(step),
        })
    }

    /// Training diagnostics of every artifact built so far, keyed by artifact.
    pub fn training_diagnostics(&self) -> BTreeMap<String, TrainDiag> {
        let mut out = BTreeMap::new();
        if let Some(b) = self.base.get() {
            out.insert("base".to_string(), b.meta.clone());
        }
        for (prefix, cell) in [("expert", &self.library), ("cluster-expert", &self.cluster_library)] {
            if let Some(l) = cell.get() {
                for (n, d) in &l.meta {
                    out.insert(format!("{prefix}/{n}"), d.clone());
                }
            }
        }
        let singles: [(&str, Option<&TrainDiag>); 8] = [
            ("shared-expert", self.shared.get().map(|c| &c.meta)),
            ("sgd-ensemble", self.sgd_ensemble.get().map(|c| &c.meta)),
            ("global-sgd-merge", self.global_merge.get().map(|c| &c.meta)),
            ("layer-sgd-merge", self.layer_merge.get().map(|c| &c.meta)),
            ("sgd-routing", self.sgd_router.get().map(|c| &c.meta)),
            ("hc", self.hc.get().map(|c| &c.meta)),
            ("arrow-hc", self.arrow_hc.get().map(|c| &c.meta)),
            ("distilled-ensemble", self.distilled.get().map(|c| &c.meta)),
        ];
        for (k, v) in singles {
            if let Some(d) = v {
                out.insert(k.to_string(), d.clone());
            }
        }
        out
    }

    pub fn save_datasets(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for d in self.datasets()? {
            d.save(&dir.join(format!("{}.json", d.spec.name)))?;
        }
        Ok(())
    }
}
