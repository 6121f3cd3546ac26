use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expert::{CosineBasis, DEFAULT_ALPHA, DEFAULT_DROPOUT, DEFAULT_RANK};
use crate::fusion::EnsembleLevel;
use crate::harness::tasks::{reference_suite, TaskSpec};
use crate::lm::LmConfig;
use crate::train::TrainHyper;

pub const SCHEMA_VERSION: u32 = 1;

/// Every method the experiment runner knows, by its report name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    Oracle,
    SharedExpert,
    UniformEnsemble,
    UniformEnsembleLogit,
    SgdEnsemble,
    LpEnsemble,
    DistilledEnsemble,
    UniformMerge,
    UniformMergeFullrank,
    GlobalSgdMerge,
    LayerSgdMerge,
    ArrowTopk,
    SgdRouting,
    Hc,
    ArrowHc,
    MbcOracle,
    MbcArrow,
    MbcUniformEnsemble,
    MbcUniformMerge,
}

impl MethodName {
    pub const ALL: [MethodName; 19] = [
        MethodName::Oracle,
        MethodName::SharedExpert,
        MethodName::UniformEnsemble,
        MethodName::UniformEnsembleLogit,
        MethodName::SgdEnsemble,
        MethodName::LpEnsemble,
        MethodName::DistilledEnsemble,
        MethodName::UniformMerge,
        MethodName::UniformMergeFullrank,
        MethodName::GlobalSgdMerge,
        MethodName::LayerSgdMerge,
        MethodName::ArrowTopk,
        MethodName::SgdRouting,
        MethodName::Hc,
        MethodName::ArrowHc,
        MethodName::MbcOracle,
        MethodName::MbcArrow,
        MethodName::MbcUniformEnsemble,
        MethodName::MbcUniformMerge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::Oracle => "oracle",
            MethodName::SharedExpert => "shared-expert",
            MethodName::UniformEnsemble => "uniform-ensemble",
            MethodName::UniformEnsembleLogit => "uniform-ensemble-logit",
            MethodName::SgdEnsemble => "sgd-ensemble",
            MethodName::LpEnsemble => "lp-ensemble",
            MethodName::DistilledEnsemble => "distilled-ensemble",
            MethodName::UniformMerge => "uniform-merge",
            MethodName::UniformMergeFullrank => "uniform-merge-fullrank",
            MethodName::GlobalSgdMerge => "global-sgd-merge",
            MethodName::LayerSgdMerge => "layer-sgd-merge",
            MethodName::ArrowTopk => "arrow-topk",
            MethodName::SgdRouting => "sgd-routing",
            MethodName::Hc => "hc",
            MethodName::ArrowHc => "arrow-hc",
            MethodName::MbcOracle => "mbc-oracle",
            MethodName::MbcArrow => "mbc-arrow",
            MethodName::MbcUniformEnsemble => "mbc-uniform-ensemble",
            MethodName::MbcUniformMerge => "mbc-uniform-merge",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSettings {
    /// Mixture examples per task used to pre-train the base.
    pub train_per_task: usize,
    pub val_per_task: usize,
    pub train: TrainHyper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSettings {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Training examples per expert (taken from the front of the task's train split).
    pub train_per_task: usize,
    /// Held-out examples per task for learning-rate selection.
    pub val_per_task: usize,
    /// Mixture examples per task for the shared expert.
    pub shared_train_per_task: usize,
    /// Training examples per cluster expert, split evenly across member tasks.
    pub cluster_train: usize,
    pub train: TrainHyper,
}

/// Expert set used by the fusion methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Basis {
    /// One expert per task.
    Private,
    /// One retrained expert per parameter-similarity cluster.
    Clusters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSettings {
    /// Experts the ensembling, merging and routing methods combine.
    pub basis: Basis,
    /// Mixture examples per task for coefficient, router and distillation training.
    pub train_per_task: usize,
    /// Held-out mixture examples per task for learning-rate selection.
    pub val_per_task: usize,
    pub ensemble_level: EnsembleLevel,
    /// L1 penalty on ensemble logits; zero disables it.
    pub l1: f64,
    pub train: TrainHyper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSettings {
    /// Number of clusters for cluster routing and cluster experts.
    pub clusters: usize,
    pub cosine_basis: CosineBasis,
    /// Experts kept by Arrow top-k routing.
    pub arrow_top_k: usize,
    /// Task index pairs for interpolation sweeps.
    pub interp_pairs: Vec<(usize, usize)>,
    /// Number of evenly spaced interpolation weights including both ends.
    pub interp_points: usize,
    /// Top-k compared against routing over all experts in the calibration delta.
    pub calibration_k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub model: LmConfig,
    pub base: BaseSettings,
    pub expert: ExpertSettings,
    pub fusion: FusionSettings,
    pub analysis: AnalysisSettings,
    pub methods: Vec<MethodName>,
    pub tasks: Vec<TaskSpec>,
}

impl Default for ExperimentConfig {
    /// The reference experiment.
    fn default() -> Self {
        let hyper = TrainHyper::default();
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            model: LmConfig::default(),
            base: BaseSettings {
                train_per_task: 250,
                val_per_task: 25,
                train: TrainHyper {
                    epochs: 2,
                    lr_grid: vec![1e-3],
                    ..hyper.clone()
                },
            },
            expert: ExpertSettings {
                rank: DEFAULT_RANK,
                alpha: DEFAULT_ALPHA,
                dropout: DEFAULT_DROPOUT,
                train_per_task: 1000,
                val_per_task: 25,
                shared_train_per_task: 125,
                cluster_train: 500,
                train: TrainHyper {
                    lr_grid: vec![1e-2, 3e-3, 1e-3],
                    ..hyper.clone()
                },
            },
            fusion: FusionSettings {
                basis: Basis::Clusters,
                train_per_task: 50,
                val_per_task: 25,
                ensemble_level: EnsembleLevel::Probability,
                l1: 0.0,
                train: TrainHyper {
                    lr_grid: vec![1e-1, 1e-2, 1e-3],
                    ..hyper
                },
            },
            analysis: AnalysisSettings {
                clusters: 3,
                cosine_basis: CosineBasis::Factors,
                arrow_top_k: 2,
                interp_pairs: vec![(0, 1), (2, 3), (4, 5), (6, 7)],
                interp_points: 11,
                calibration_k: 1,
            },
            methods: MethodName::ALL.to_vec(),
            tasks: reference_suite(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        for h in [&self.base.train, &self.expert.train, &self.fusion.train] {
            h.validate()?;
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        let mut names = std::collections::HashSet::new();
        for t in &self.tasks {
            t.validate()?;
            if !names.insert(&t.name) {
                return Err(Error::Config(format!("duplicate task `{}`", t.name)));
            }
            if t.max_sequence() > self.model.max_len {
                return Err(Error::Config(format!(
                    "task `{}` needs sequences of {} tokens, model allows {}",
                    t.name,
                    t.max_sequence(),
                    self.model.max_len
                )));
            }
            let need_train = [
                self.base.train_per_task,
                self.expert.train_per_task,
                self.expert.shared_train_per_task,
                self.expert.cluster_train,
                self.fusion.train_per_task,
            ];
            let need_val = [self.base.val_per_task, self.expert.val_per_task, self.fusion.val_per_task];
            if t.train < need_train.into_iter().max().unwrap_or(0)
                || t.val < need_val.into_iter().max().unwrap_or(0)
                || need_val.contains(&0)
                || need_train.contains(&0)
                || t.test == 0
            {
                return Err(Error::Config(format!("task `{}` has too few examples for the configured subsets", t.name)));
            }
        }
        if self.model.vocab < crate::harness::tasks::VOCAB_USED as usize {
            return Err(Error::Config("model vocabulary is smaller than the task alphabet".into()));
        }
        let n = self.tasks.len();
        if self.expert.rank == 0 || !(self.expert.alpha > 0.0) || !(0.0..1.0).contains(&self.expert.dropout) {
            return Err(Error::Config("expert rank, alpha or dropout out of range".into()));
        }
        let a = &self.analysis;
        if a.clusters == 0 || a.clusters > n {
            return Err(Error::Config(format!("clusters must lie in 1..={n}")));
        }
        if a.arrow_top_k == 0 || a.arrow_top_k > n || a.calibration_k == 0 || a.calibration_k > n {
            return Err(Error::Config(format!("top-k values must lie in 1..={n}")));
        }
        if a.interp_points < 2 {
            return Err(Error::Config("interp_points must be at least 2".into()));
        }
        if a.interp_pairs.iter().any(|&(i, j)| i >= n || j >= n) {
            return Err(Error::Config("interpolation pair refers to a missing task".into()));
        }
        Ok(())
    }

    /// Short content hash of the canonical serialized config.
    pub fn hash(&self) -> String {
        content_hash(&serde_json::to_string(self).expect("config serializes"))
    }

    pub fn interp_alphas(&self) -> Vec<f64> {
        let n = self.analysis.interp_points;
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    pub fn has(&self, m: MethodName) -> bool {
        self.methods.contains(&m)
    }
}

/// First 16 hex digits of SHA-256.
pub fn content_hash(material: &str) -> String {
    let d = Sha256::digest(material.as_bytes());
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
