//! Data mixtures and the training jobs that produce the base model and experts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::LoraAdapter;
use crate::fusion::mean_loss;
use crate::harness::config::ExpertSettings;
use crate::harness::tasks::TaskDataset;
use crate::lm::{AdapterRef, BaseLm, Example, LmConfig};
use crate::numerics::Rng;
use crate::train::{fit, AdapterObjective, BaseObjective, FitOutcome, LrTrial, Targets, TrainHyper};

/// Training summary kept in caches and reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainDiag {
    pub lr: f64,
    pub trials: Vec<LrTrial>,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

impl TrainDiag {
    pub fn from_outcome<P>(out: &FitOutcome<P>) -> Self {
        Self {
            lr: out.lr,
            trials: out.trials.clone(),
            initial_train_loss: out.initial_train_loss,
            final_train_loss: out.final_train_loss,
            steps: out.step_losses.len(),
            extra: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.extra.insert(key.to_string(), value);
        self
    }
}

/// Seed of a named job, derived from the run seed.
pub fn job_seed(seed: u64, job: &str) -> u64 {
    Rng::derive(seed, job).next_u64()
}

/// The first `per_task` examples of each task's split, interleaved task by task and
/// then shuffled, so every batch draws from all tasks alike.
pub fn mixture<'a>(
    parts: impl IntoIterator<Item = &'a [Example]>,
    per_task: usize,
    seed: u64,
    label: &str,
) -> Vec<Example> {
    let parts: Vec<&[Example]> = parts.into_iter().collect();
    let mut out = Vec::new();
    for j in 0..per_task {
        for p in &parts {
            if let Some(e) = p.get(j) {
                out.push(e.clone());
            }
        }
    }
    Rng::derive(seed, &format!("mixture/{label}")).shuffle(&mut out);
    out
}

pub fn generate_suite(tasks: &[crate::harness::tasks::TaskSpec], seed: u64) -> Result<Vec<TaskDataset>> {
    tasks.iter().map(|t| t.generate(seed)).collect()
}

/// Pre-trains a freshly initialized base on a task mixture and freezes it.
pub fn train_base(
    config: &LmConfig,
    train: &[Example],
    val: &[Example],
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(BaseLm, TrainDiag)> {
    let init = BaseLm::build(config.clone(), &mut Rng::derive(seed, "base/init"))?;
    let obj = BaseObjective { train, val };
    let out = fit(&obj, &init, hyper, job_seed(seed, "base/train"))?;
    let mut base = out.params.clone();
    base.refresh_fingerprint();
    let val_loss = mean_loss(&base, AdapterRef::None, val)?;
    Ok((base, TrainDiag::from_outcome(&out).with("val_loss", val_loss)))
}

/// Fine-tunes one adapter on hard targets from `B = 0`, so training starts at the base.
pub fn train_expert(
    base: &BaseLm,
    train: &[Example],
    val: &[Example],
    settings: &ExpertSettings,
    seed: u64,
    job: &str,
) -> Result<(LoraAdapter, TrainDiag)> {
    if train.is_empty() {
        return Err(Error::EmptyData(format!("no training data for `{job}`")));
    }
    let init = LoraAdapter::init_for_training(
        base,
        settings.rank,
        settings.alpha,
        &mut Rng::derive(seed, &format!("{job}/init")),
    )?;
    let obj = AdapterObjective {
        base,
        train,
        val,
        targets: Targets::Hard,
        dropout: settings.dropout,
    };
    let out = fit(&obj, &init, &settings.train, job_seed(seed, &format!("{job}/train")))?;
    let base_val = mean_loss(base, AdapterRef::None, val)?;
    let val_loss = mean_loss(base, AdapterRef::Lora(&out.params), val)?;
    if !(val_loss < base_val) {
        log::warn!("{job}: held-out loss {val_loss:.4} did not improve on the base ({base_val:.4})");
    }
    let diag = TrainDiag::from_outcome(&out)
        .with("base_val_loss", base_val)
        .with("val_loss", val_loss);
    Ok((out.params, diag))
}

/// One expert per task on the front of its own training split.
pub fn train_task_experts(
    base: &BaseLm,
    datasets: &[TaskDataset],
    settings: &ExpertSettings,
    seed: u64,
) -> Result<Vec<(String, LoraAdapter, TrainDiag)>> {
    datasets
        .iter()
        .map(|d| {
            let name = d.spec.name.clone();
            let n = settings.train_per_task.min(d.train.len());
            let v = settings.val_per_task.min(d.val.len());
            log::info!("training expert `{name}` on {n} examples");
            let (ad, diag) = train_expert(base, &d.train[..n], &d.val[..v], settings, seed, &format!("expert/{name}"))
                .map_err(|e| e.at_step(format!("train expert `{name}`")))?;
            Ok((name.clone(), ad.with_task(name), diag))
        })
        .collect()
}

/// A single adapter on the uniform mixture of every task.
pub fn train_shared_expert(
    base: &BaseLm,
    datasets: &[TaskDataset],
    settings: &ExpertSettings,
    seed: u64,
) -> Result<(LoraAdapter, TrainDiag)> {
    let train = mixture(datasets.iter().map(|d| d.train.as_slice()), settings.shared_train_per_task, seed, "shared/train");
    let val = mixture(datasets.iter().map(|d| d.val.as_slice()), settings.val_per_task, seed, "shared/val");
    train_expert(base, &train, &val, settings, seed, "shared")
}

/// One adapter per cluster, trained on the pooled data of its member tasks.
pub fn train_cluster_experts(
    base: &BaseLm,
    datasets: &[TaskDataset],
    clusters: &[Vec<usize>],
    settings: &ExpertSettings,
    seed: u64,
) -> Result<Vec<(String, LoraAdapter, TrainDiag)>> {
    clusters
        .iter()
        .enumerate()
        .map(|(c, members)| {
            if members.is_empty() {
                return Err(Error::Invalid(format!("cluster {c} is empty")));
            }
            let per = settings.cluster_train.div_ceil(members.len());
            let parts = members.iter().map(|&t| datasets[t].train.as_slice());
            let train = mixture(parts, per, seed, &format!("cluster{c}/train"));
            let vparts = members.iter().map(|&t| datasets[t].val.as_slice());
            let val = mixture(vparts, settings.val_per_task, seed, &format!("cluster{c}/val"));
            let name = format!("cluster{c}");
            log::info!("training cluster expert `{name}` on {} examples", train.len());
            let (ad, diag) = train_expert(base, &train, &val, settings, seed, &format!("cluster/{c}"))
                .map_err(|e| e.at_step(format!("train `{name}`")))?;
            Ok((name, ad, diag))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_is_balanced_and_seeded() {
        let a: Vec<Example> = (0..5).map(|i| Example::new(vec![2 + i], vec![2])).collect();
        let b: Vec<Example> = (0..5).map(|i| Example::new(vec![10 + i], vec![3])).collect();
        let m = mixture([a.as_slice(), b.as_slice()], 3, 1, "x");
        assert_eq!(m.len(), 6);
        assert_eq!(m.iter().filter(|e| e.target == vec![2]).count(), 3);
        assert_eq!(m, mixture([a.as_slice(), b.as_slice()], 3, 1, "x"));
        let short = mixture([a.as_slice(), &b[..1]], 3, 1, "x");
        assert_eq!(short.len(), 4);
    }
}
