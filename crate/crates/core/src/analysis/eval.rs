use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{ExpertLibrary, LoraAdapter};
use crate::fusion::{ensemble_predict, DenseDelta, EnsembleSpec, ErrorMatrix};
use crate::lm::{sum_token_loss, target_distributions, AdapterRef, BaseLm, Example};
use crate::numerics::Matrix;
use crate::routing::Router;

/// One labelled evaluation split.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub name: String,
    pub examples: Vec<Example>,
}

/// How next-token distributions are produced for evaluation.
#[derive(Clone, Copy)]
pub enum Method<'a> {
    Base,
    Adapter(&'a LoraAdapter),
    Dense(&'a DenseDelta),
    Ensemble {
        library: &'a ExpertLibrary,
        spec: &'a EnsembleSpec,
    },
    Routed {
        experts: &'a [LoraAdapter],
        router: &'a Router,
    },
}

impl<'a> Method<'a> {
    pub fn distributions(&self, base: &BaseLm, example: &Example) -> Result<Vec<Vec<f64>>> {
        match *self {
            Method::Base => target_distributions(base, AdapterRef::None, example),
            Method::Adapter(a) => target_distributions(base, AdapterRef::Lora(a), example),
            Method::Dense(d) => target_distributions(base, AdapterRef::Dense(d), example),
            Method::Ensemble { library, spec } => ensemble_predict(base, library, spec, example),
            Method::Routed { experts, router } => {
                target_distributions(base, AdapterRef::Routed { experts, router }, example)
            }
        }
    }
}

/// Summed token loss and token count of `method` over `examples`.
pub fn loss_sum(base: &BaseLm, method: Method<'_>, examples: &[Example]) -> Result<(f64, usize)> {
    let (mut total, mut count) = (0.0, 0usize);
    for ex in examples {
        let d = method.distributions(base, ex)?;
        total += sum_token_loss(&d, &ex.target);
        count += ex.target.len();
    }
    Ok((total, count))
}

/// Mean token loss; errors when there are no target tokens.
pub fn token_mean(base: &BaseLm, method: Method<'_>, examples: &[Example]) -> Result<f64> {
    let (total, count) = loss_sum(base, method, examples)?;
    if count == 0 {
        return Err(Error::EmptyData("no target tokens to evaluate".into()));
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub tasks: Vec<String>,
    pub per_task: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub stderr: f64,
}

/// Sample standard deviation over `√T`; zero for a single task.
pub fn standard_error(values: &[f64]) -> f64 {
    let t = values.len();
    if t < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / t as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (t - 1) as f64;
    (var / t as f64).sqrt()
}

impl EvalReport {
    pub fn from_losses(method: impl Into<String>, tasks: Vec<String>, per_task: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if per_task.is_empty() {
            return Err(Error::EmptyData("no tasks to report".into()));
        }
        let mean = per_task.iter().sum::<f64>() / per_task.len() as f64;
        let stderr = standard_error(&per_task);
        Ok(Self {
            method: method.into(),
            tasks,
            per_task,
            counts,
            mean,
            stderr,
        })
    }
}

/// Per-task mean token loss of one method; the overall mean weights tasks equally.
pub fn eval_method(base: &BaseLm, label: &str, method: Method<'_>, tasks: &[TaskData]) -> Result<EvalReport> {
    eval_with(label, tasks, |_, t| token_mean(base, method, &t.examples))
}

fn eval_with(label: &str, tasks: &[TaskData], mut f: impl FnMut(usize, &TaskData) -> Result<f64>) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(Error::EmptyData("empty task set".into()));
    }
    let mut per_task = Vec::with_capacity(tasks.len());
    for (i, t) in tasks.iter().enumerate() {
        per_task.push(f(i, t)?);
    }
    EvalReport::from_losses(
        label,
        tasks.iter().map(|t| t.name.clone()).collect(),
        per_task,
        tasks.iter().map(|t| t.examples.len()).collect(),
    )
}

/// Each task evaluated under the adapter it is mapped to.
pub fn oracle_eval(
    base: &BaseLm,
    label: &str,
    experts: &[LoraAdapter],
    tasks: &[TaskData],
    mapping: &[usize],
) -> Result<EvalReport> {
    if mapping.len() != tasks.len() {
        return Err(Error::Invalid(format!(
            "mapping covers {} of {} tasks",
            mapping.len(),
            tasks.len()
        )));
    }
    eval_with(label, tasks, |i, t| {
        let e = experts
            .get(mapping[i])
            .ok_or(Error::OutOfRange { index: mapping[i], size: experts.len() })?;
        token_mean(base, Method::Adapter(e), &t.examples)
    })
}

/// `M[i][t]` = mean loss of expert `i` on task `t`.
pub fn expert_task_matrix(base: &BaseLm, library: &ExpertLibrary, tasks: &[TaskData]) -> Result<ErrorMatrix> {
    let mut m = Matrix::zeros(library.len(), tasks.len());
    for (i, e) in library.adapters().iter().enumerate() {
        for (t, task) in tasks.iter().enumerate() {
            m[(i, t)] = token_mean(base, Method::Adapter(e), &task.examples)?;
        }
    }
    ErrorMatrix::new(
        library.names().to_vec(),
        tasks.iter().map(|t| t.name.clone()).collect(),
        m,
    )
}

/// Number of experts `i` that are not the best on task `i` (ties favour `i`).
pub fn rank_check(m: &Matrix) -> Result<usize> {
    if m.rows() != m.cols() {
        return Err(Error::Shape(format!(
            "rank check needs a square matrix, got {:?}",
            m.shape()
        )));
    }
    Ok((0..m.cols())
        .filter(|&t| (0..m.rows()).any(|j| m[(j, t)] < m[(t, t)]))
        .count())
}
