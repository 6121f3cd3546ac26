//! Shared minibatch trainer with learning-rate selection on held-out loss.
//!
//! Every learned quantity in the crate (base weights, adapters, fusion logits,
//! routers) is fitted through [`fit`], so they share epochs, batching, shuffling
//! and the learning-rate grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{AdapterRef, BaseLm, Dropout, Example, GradSink};
use crate::numerics::{soft_cross_entropy, Matrix, Optimizer, OptimizerKind, Params, Rng, PROB_EPS};

/// Trainer settings. Reference values: 5 epochs, learning rate chosen from
/// `{1e-3, 1e-4, 1e-5}` by validation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub lr_grid: Vec<f64>,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr_grid: vec![1e-3, 1e-4, 1e-5],
            batch_size: 16,
            optimizer: OptimizerKind::AdaptiveMoment,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|lr| !(*lr > 0.0)) {
            return Err(Error::Config("lr_grid must hold positive learning rates".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// A differentiable training objective over an indexed training set.
pub trait Objective {
    type Params: Params + Clone;

    fn train_len(&self) -> usize;

    /// Summed loss, number of loss terms, and summed gradient over training items `idx`.
    fn loss_grad(
        &self,
        params: &Self::Params,
        idx: &[usize],
        rng: &mut Rng,
    ) -> Result<(f64, usize, Self::Params)>;

    /// Mean loss over all training items without stochastic regularization.
    fn train_loss(&self, params: &Self::Params) -> Result<f64>;

    /// Mean held-out loss, used to pick the learning rate.
    fn val_loss(&self, params: &Self::Params) -> Result<f64>;

    /// Mean loss and gradient over `idx`, deterministic (no dropout). Used by gradient checks.
    fn mean_loss_grad(&self, params: &Self::Params, idx: &[usize]) -> Result<(f64, Self::Params)> {
        let (l, n, mut g) = self.loss_grad(params, idx, &mut Rng::new(0))?;
        let inv = 1.0 / n.max(1) as f64;
        scale(&mut g, inv);
        Ok((l * inv, g))
    }
}

pub fn scale<P: Params>(p: &mut P, s: f64) {
    for b in p.blocks_mut() {
        b.iter_mut().for_each(|v| *v *= s);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LrTrial {
    pub lr: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome<P> {
    pub params: P,
    pub lr: f64,
    pub trials: Vec<LrTrial>,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    /// Minibatch losses of the selected run, in step order.
    pub step_losses: Vec<f64>,
}

/// Trains from `init` once per learning rate and keeps the run with the lowest
/// validation loss (earliest grid entry on ties). Shuffling and dropout streams are
/// identical across learning rates.
pub fn fit<O: Objective>(
    objective: &O,
    init: &O::Params,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<FitOutcome<O::Params>> {
    hyper.validate()?;
    let n = objective.train_len();
    if n == 0 {
        return Err(Error::EmptyData("training set is empty".into()));
    }
    let initial_train_loss = objective.train_loss(init)?;
    let mut best: Option<(O::Params, f64, f64, Vec<f64>)> = None;
    let mut trials = Vec::with_capacity(hyper.lr_grid.len());
    for &lr in &hyper.lr_grid {
        let (params, steps) = run_epochs(objective, init, hyper, lr, seed)?;
        let val = objective.val_loss(&params)?;
        trials.push(LrTrial { lr, val_loss: val });
        let better = match &best {
            None => true,
            Some((_, _, bv, _)) => val < *bv,
        };
        if better && val.is_finite() {
            best = Some((params, lr, val, steps));
        }
    }
    let (params, lr, _, step_losses) =
        best.ok_or_else(|| Error::NonFinite("validation loss for every learning rate".into()))?;
    let final_train_loss = objective.train_loss(&params)?;
    Ok(FitOutcome {
        params,
        lr,
        trials,
        initial_train_loss,
        final_train_loss,
        step_losses,
    })
}

/// Plain training at one learning rate.
pub fn run_epochs<O: Objective>(
    objective: &O,
    init: &O::Params,
    hyper: &TrainHyper,
    lr: f64,
    seed: u64,
) -> Result<(O::Params, Vec<f64>)> {
    let n = objective.train_len();
    let mut params = init.clone();
    let mut opt = Optimizer::new(hyper.optimizer, lr);
    let mut order_rng = Rng::derive(seed, "train/order");
    let mut noise_rng = Rng::derive(seed, "train/noise");
    let mut order: Vec<usize> = (0..n).collect();
    let mut step_losses = Vec::new();
    let mut step = 0usize;
    for _ in 0..hyper.epochs {
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(hyper.batch_size) {
            let (loss, count, mut grad) = objective.loss_grad(&params, chunk, &mut noise_rng)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            scale(&mut grad, 1.0 / count.max(1) as f64);
            opt.step(&mut params, &grad)?;
            if params.blocks().iter().any(|b| b.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { step });
            }
            step_losses.push(loss / count.max(1) as f64);
            step += 1;
        }
    }
    Ok((params, step_losses))
}

/// Per-position supervision for adapter and base training.
#[derive(Clone, Debug)]
pub enum Targets {
    /// The example's own target tokens.
    Hard,
    /// Full distributions per masked position (distillation), indexed like the data.
    Soft {
        train: Vec<Vec<Vec<f64>>>,
        val: Vec<Vec<Vec<f64>>>,
    },
}

/// Token-level loss and `dL/dlogits` for one forward tape.
pub(crate) fn example_loss_grad(
    base: &BaseLm,
    adapter: AdapterRef<'_>,
    example: &Example,
    soft: Option<&[Vec<f64>]>,
    dropout: Option<Dropout<'_>>,
) -> Result<(f64, usize, crate::lm::Tape, Matrix)> {
    let batch = example.to_batch();
    let tape = base.forward(&batch.tokens, adapter, dropout)?;
    let v = base.config.vocab;
    let mut dlogits = Matrix::zeros(tape.len(), v);
    let mut loss = 0.0;
    let mut count = 0;
    for (k, t) in batch.masked_positions().enumerate() {
        let p = tape.probs(t);
        let row = dlogits.row_mut(t);
        match soft {
            None => {
                let y = batch.targets[t] as usize;
                loss += -(p[y] + PROB_EPS).ln();
                row.copy_from_slice(&p);
                row[y] -= 1.0;
            }
            Some(q) => {
                loss += soft_cross_entropy(&p, &q[k]);
                for j in 0..v {
                    row[j] = p[j] - q[k][j];
                }
            }
        }
        count += 1;
    }
    Ok((loss, count, tape, dlogits))
}

/// Trains a single adapter on hard or soft targets (expert fine-tuning, distillation).
pub struct AdapterObjective<'a> {
    pub base: &'a BaseLm,
    pub train: &'a [Example],
    pub val: &'a [Example],
    pub targets: Targets,
    pub dropout: f64,
}

impl<'a> AdapterObjective<'a> {
    fn soft_for(&self, split_train: bool, i: usize) -> Option<&[Vec<f64>]> {
        match &self.targets {
            Targets::Hard => None,
            Targets::Soft { train, val } => Some(if split_train { &train[i] } else { &val[i] }),
        }
    }

    fn mean_loss(&self, adapter: &crate::expert::LoraAdapter, split_train: bool) -> Result<f64> {
        let data = if split_train { self.train } else { self.val };
        let (mut total, mut count) = (0.0, 0usize);
        for (i, ex) in data.iter().enumerate() {
            let (l, c, _, _) =
                example_loss_grad(self.base, AdapterRef::Lora(adapter), ex, self.soft_for(split_train, i), None)?;
            total += l;
            count += c;
        }
        Ok(total / count.max(1) as f64)
    }
}

impl<'a> Objective for AdapterObjective<'a> {
    type Params = crate::expert::LoraAdapter;

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn loss_grad(
        &self,
        params: &Self::Params,
        idx: &[usize],
        rng: &mut Rng,
    ) -> Result<(f64, usize, Self::Params)> {
        let mut grad = params.zeroed();
        let (mut total, mut count) = (0.0, 0usize);
        for &i in idx {
            let dropout = (self.dropout > 0.0).then(|| Dropout { p: self.dropout, rng: &mut *rng });
            let (l, c, tape, dlogits) = example_loss_grad(
                self.base,
                AdapterRef::Lora(params),
                &self.train[i],
                self.soft_for(true, i),
                dropout,
            )?;
            self.base.backward(
                &tape,
                AdapterRef::Lora(params),
                &dlogits,
                &mut GradSink {
                    lora: Some(&mut grad),
                    ..Default::default()
                },
            )?;
            total += l;
            count += c;
        }
        Ok((total, count, grad))
    }

    fn train_loss(&self, params: &Self::Params) -> Result<f64> {
        self.mean_loss(params, true)
    }

    fn val_loss(&self, params: &Self::Params) -> Result<f64> {
        self.mean_loss(params, false)
    }
}

/// Pre-trains every base weight on hard targets.
pub struct BaseObjective<'a> {
    pub train: &'a [Example],
    pub val: &'a [Example],
}

impl<'a> BaseObjective<'a> {
    fn mean_loss(&self, base: &BaseLm, data: &[Example]) -> Result<f64> {
        let (mut total, mut count) = (0.0, 0usize);
        for ex in data {
            let (l, c, _, _) = example_loss_grad(base, AdapterRef::None, ex, None, None)?;
            total += l;
            count += c;
        }
        Ok(total / count.max(1) as f64)
    }
}

impl<'a> Objective for BaseObjective<'a> {
    type Params = BaseLm;

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn loss_grad(&self, params: &BaseLm, idx: &[usize], _rng: &mut Rng) -> Result<(f64, usize, BaseLm)> {
        let mut grad = params.zeroed();
        let (mut total, mut count) = (0.0, 0usize);
        for &i in idx {
            let (l, c, tape, dlogits) = example_loss_grad(params, AdapterRef::None, &self.train[i], None, None)?;
            params.backward(
                &tape,
                AdapterRef::None,
                &dlogits,
                &mut GradSink {
                    base: Some(&mut grad),
                    ..Default::default()
                },
            )?;
            total += l;
            count += c;
        }
        Ok((total, count, grad))
    }

    fn train_loss(&self, params: &BaseLm) -> Result<f64> {
        self.mean_loss(params, self.train)
    }

    fn val_loss(&self, params: &BaseLm) -> Result<f64> {
        self.mean_loss(params, self.val)
    }
}
