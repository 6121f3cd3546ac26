//! Learned input-independent coefficients and ensemble distillation.

use crate::error::{Error, Result};
use crate::expert::{ExpertLibrary, LoraAdapter};
use crate::fusion::ensemble::{expert_logits, ensemble_predict, EnsembleLevel, EnsembleSpec};
use crate::fusion::merge::merge_lowrank;
use crate::fusion::simplex::{SimplexLogits, SimplexWeights, WeightMode};
use crate::lm::{AdapterRef, BaseLm, Example, GradSink, SiteId};
use crate::numerics::{kl_divergence, softmax_backward, softmax_in_place, Matrix, Params, Rng, PROB_EPS};
use crate::train::{example_loss_grad, fit, AdapterObjective, FitOutcome, Objective, Targets, TrainHyper};

/// Expert logits at every masked position, computed once so that coefficient
/// training does not rerun the model.
#[derive(Clone, Debug)]
pub struct ExpertOutputs {
    /// `[example][position]` → `N × V`
    pub logits: Vec<Vec<Matrix>>,
    pub targets: Vec<Vec<u32>>,
}

impl ExpertOutputs {
    pub fn compute(base: &BaseLm, library: &ExpertLibrary, data: &[Example]) -> Result<Self> {
        library.check_compatible(base)?;
        let logits = data
            .iter()
            .map(|ex| expert_logits(base, library, ex, &[]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            logits,
            targets: data.iter().map(|e| e.target.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

/// Loss and `dL/dλ` of one position.
fn position_loss_grad(level: EnsembleLevel, lambda: &[f64], z: &Matrix, y: usize, dlam: &mut [f64]) -> f64 {
    let n = z.rows();
    match level {
        EnsembleLevel::Probability => {
            let probs: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let mut p = z.row(i).to_vec();
                    softmax_in_place(&mut p);
                    p
                })
                .collect();
            let py: f64 = (0..n).map(|i| lambda[i] * probs[i][y]).sum::<f64>() + PROB_EPS;
            for i in 0..n {
                dlam[i] -= probs[i][y] / py;
            }
            -py.ln()
        }
        EnsembleLevel::Logit => {
            let v = z.cols();
            let mut mixed = vec![0.0; v];
            for i in 0..n {
                crate::numerics::axpy(lambda[i], z.row(i), &mut mixed);
            }
            softmax_in_place(&mut mixed);
            let loss = -(mixed[y] + PROB_EPS).ln();
            mixed[y] -= 1.0;
            for i in 0..n {
                dlam[i] += crate::numerics::dot(z.row(i), &mixed);
            }
            loss
        }
    }
}

/// Cross-entropy of a global ensemble over precomputed expert outputs.
pub struct EnsembleObjective<'a> {
    pub train: &'a ExpertOutputs,
    pub val: &'a ExpertOutputs,
    pub level: EnsembleLevel,
    /// Optional L1 penalty on the logits (off at 0).
    pub l1: f64,
}

impl<'a> EnsembleObjective<'a> {
    fn loss_over(&self, params: &SimplexLogits, data: &ExpertOutputs, idx: &[usize]) -> Result<(f64, usize, SimplexLogits)> {
        let w = params.weights()?;
        let lambda = w.row_for_layer(0);
        let n = lambda.len();
        let mut dlam = vec![0.0; n];
        let (mut total, mut count) = (0.0, 0usize);
        for &e in idx {
            for (z, &y) in data.logits[e].iter().zip(&data.targets[e]) {
                total += position_loss_grad(self.level, lambda, z, y as usize, &mut dlam);
                count += 1;
            }
        }
        let mut grad = params.zeroed();
        grad.logits.row_mut(0).copy_from_slice(&softmax_backward(lambda, &dlam));
        if self.l1 > 0.0 {
            let c = count.max(1) as f64;
            for (g, t) in grad.logits.data_mut().iter_mut().zip(params.logits.data()) {
                *g += self.l1 * c * t.signum();
            }
            total += self.l1 * c * params.logits.data().iter().map(|t| t.abs()).sum::<f64>();
        }
        Ok((total, count, grad))
    }

    fn mean(&self, params: &SimplexLogits, data: &ExpertOutputs) -> Result<f64> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let (l, c, _) = self.loss_over(params, data, &idx)?;
        Ok(l / c.max(1) as f64)
    }
}

impl<'a> Objective for EnsembleObjective<'a> {
    type Params = SimplexLogits;

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn loss_grad(&self, params: &SimplexLogits, idx: &[usize], _rng: &mut Rng) -> Result<(f64, usize, SimplexLogits)> {
        self.loss_over(params, self.train, idx)
    }

    fn train_loss(&self, params: &SimplexLogits) -> Result<f64> {
        self.mean(params, self.train)
    }

    fn val_loss(&self, params: &SimplexLogits) -> Result<f64> {
        self.mean(params, self.val)
    }
}

/// Learns global ensemble coefficients from zero logits (uniform start).
pub fn fit_ensemble_weights(
    train: &ExpertOutputs,
    val: &ExpertOutputs,
    level: EnsembleLevel,
    l1: f64,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(EnsembleSpec, FitOutcome<SimplexLogits>)> {
    let n = train
        .logits
        .iter()
        .flatten()
        .next()
        .map(Matrix::rows)
        .ok_or_else(|| Error::EmptyData("no training positions for ensemble weights".into()))?;
    let obj = EnsembleObjective { train, val, level, l1 };
    let out = fit(&obj, &SimplexLogits::zeros(n, WeightMode::Global, 1), hyper, seed)?;
    Ok((EnsembleSpec::new(out.params.weights()?, level)?, out))
}

/// Cross-entropy of the model carrying `merge_lowrank(library, softmax(θ))`.
pub struct MergeObjective<'a> {
    pub base: &'a BaseLm,
    pub library: &'a ExpertLibrary,
    pub train: &'a [Example],
    pub val: &'a [Example],
}

/// `dL/dλ` rows from the gradient with respect to the merged factors.
pub(crate) fn merge_lambda_grad(
    adapters: &[&LoraAdapter],
    mode: WeightMode,
    rows: usize,
    merged_grad: &LoraAdapter,
) -> Matrix {
    let mut dlam = Matrix::zeros(rows, adapters.len());
    for (s, g) in merged_grad.sites.iter().enumerate() {
        let r = match mode {
            WeightMode::Global => 0,
            WeightMode::PerLayer => SiteId::from_index(s).layer,
        };
        for (i, e) in adapters.iter().enumerate() {
            dlam[(r, i)] += g.a.inner(&e.sites[s].a) + g.b.inner(&e.sites[s].b);
        }
    }
    dlam
}

pub(crate) fn logits_grad(weights: &SimplexWeights, dlam: &Matrix) -> SimplexLogits {
    let mut out = Matrix::zeros(dlam.rows(), dlam.cols());
    for r in 0..dlam.rows() {
        out.row_mut(r).copy_from_slice(&softmax_backward(weights.lambda().row(r), dlam.row(r)));
    }
    SimplexLogits {
        mode: weights.mode,
        logits: out,
    }
}

/// Mean token loss of `adapter` on `data`.
pub fn mean_loss(base: &BaseLm, adapter: AdapterRef<'_>, data: &[Example]) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for ex in data {
        let (l, c, _, _) = example_loss_grad(base, adapter, ex, None, None)?;
        total += l;
        count += c;
    }
    if count == 0 {
        return Err(Error::EmptyData("no target positions".into()));
    }
    Ok(total / count as f64)
}

impl<'a> Objective for MergeObjective<'a> {
    type Params = SimplexLogits;

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn loss_grad(&self, params: &SimplexLogits, idx: &[usize], _rng: &mut Rng) -> Result<(f64, usize, SimplexLogits)> {
        let w = params.weights()?;
        let merged = merge_lowrank(self.library, &w)?;
        let mut g = merged.zeroed();
        let (mut total, mut count) = (0.0, 0usize);
        for &i in idx {
            let (l, c, tape, dlogits) = example_loss_grad(self.base, AdapterRef::Lora(&merged), &self.train[i], None, None)?;
            self.base.backward(
                &tape,
                AdapterRef::Lora(&merged),
                &dlogits,
                &mut GradSink {
                    lora: Some(&mut g),
                    ..Default::default()
                },
            )?;
            total += l;
            count += c;
        }
        let refs: Vec<&LoraAdapter> = self.library.adapters().iter().collect();
        let dlam = merge_lambda_grad(&refs, w.mode, w.num_rows(), &g);
        Ok((total, count, logits_grad(&w, &dlam)))
    }

    fn train_loss(&self, params: &SimplexLogits) -> Result<f64> {
        let merged = merge_lowrank(self.library, &params.weights()?)?;
        mean_loss(self.base, AdapterRef::Lora(&merged), self.train)
    }

    fn val_loss(&self, params: &SimplexLogits) -> Result<f64> {
        let merged = merge_lowrank(self.library, &params.weights()?)?;
        mean_loss(self.base, AdapterRef::Lora(&merged), self.val)
    }
}

/// Learns merge coefficients (one row, or one row per layer) from a uniform start.
pub fn fit_merge_weights(
    base: &BaseLm,
    library: &ExpertLibrary,
    train: &[Example],
    val: &[Example],
    mode: WeightMode,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(SimplexWeights, FitOutcome<SimplexLogits>)> {
    library.check_compatible(base)?;
    let obj = MergeObjective { base, library, train, val };
    let init = SimplexLogits::zeros(library.len(), mode, base.config.layers);
    let out = fit(&obj, &init, hyper, seed)?;
    Ok((out.params.weights()?, out))
}

/// Teacher distributions at the masked positions of every example.
pub fn teacher_targets(
    base: &BaseLm,
    library: &ExpertLibrary,
    teacher: &EnsembleSpec,
    data: &[Example],
) -> Result<Vec<Vec<Vec<f64>>>> {
    data.iter().map(|ex| ensemble_predict(base, library, teacher, ex)).collect()
}

/// Mean per-position `KL(teacher ‖ student)`.
pub fn mean_kl(base: &BaseLm, student: &LoraAdapter, data: &[Example], teacher: &[Vec<Vec<f64>>]) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for (ex, q) in data.iter().zip(teacher) {
        let p = crate::lm::target_distributions(base, AdapterRef::Lora(student), ex)?;
        for (pk, qk) in p.iter().zip(q) {
            total += kl_divergence(qk, pk);
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub student: LoraAdapter,
    pub fit: FitOutcome<LoraAdapter>,
    pub initial_kl: f64,
    pub final_kl: f64,
}

/// Fits a fresh adapter to the teacher ensemble's soft predictions.
#[allow(clippy::too_many_arguments)]
pub fn distill(
    base: &BaseLm,
    library: &ExpertLibrary,
    teacher: &EnsembleSpec,
    train: &[Example],
    val: &[Example],
    dropout: f64,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<DistillOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyData("distillation set is empty".into()));
    }
    let qt = teacher_targets(base, library, teacher, train)?;
    let qv = teacher_targets(base, library, teacher, val)?;
    let init = LoraAdapter::init_for_training(
        base,
        library.rank(),
        library.alpha(),
        &mut Rng::derive(seed, "distill/init"),
    )?;
    let initial_kl = mean_kl(base, &init, train, &qt)?;
    let obj = AdapterObjective {
        base,
        train,
        val,
        targets: Targets::Soft { train: qt.clone(), val: qv },
        dropout,
    };
    let fit = fit(&obj, &init, hyper, seed)?;
    let final_kl = mean_kl(base, &fit.params, train, &qt)?;
    Ok(DistillOutcome {
        student: fit.params.clone(),
        fit,
        initial_kl,
        final_kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;
    use crate::numerics::{finite_diff_grad, relative_error};

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
            Example::new(vec![9, 2, 2, 3], vec![3, 9]),
        ];
        (base, lib, data)
    }

    fn random_logits(mode: WeightMode, rows: usize, n: usize, seed: u64) -> SimplexLogits {
        let mut rng = Rng::new(seed);
        SimplexLogits { mode, logits: Matrix::from_fn(rows, n, |_, _| rng.normal()) }
    }

    fn check_grad<O: Objective<Params = SimplexLogits>>(obj: &O, p: &SimplexLogits) {
        let idx: Vec<usize> = (0..obj.train_len()).collect();
        let (_, g) = obj.mean_loss_grad(p, &idx).unwrap();
        let fd = finite_diff_grad(
            |x| {
                let mut q = p.clone();
                q.set_flat(x).unwrap();
                obj.mean_loss_grad(&q, &idx).unwrap().0
            },
            &p.flat(),
        )
        .unwrap();
        assert!(relative_error(&g.flat(), &fd) < 1e-4, "{:?} vs {:?}", g.flat(), fd);
    }

    #[test]
    fn ensemble_gradients() {
        let (base, lib, data) = small();
        let out = ExpertOutputs::compute(&base, &lib, &data).unwrap();
        for level in [EnsembleLevel::Probability, EnsembleLevel::Logit] {
            let obj = EnsembleObjective { train: &out, val: &out, level, l1: 0.0 };
            check_grad(&obj, &random_logits(WeightMode::Global, 1, 3, 7));
        }
    }

    #[test]
    fn merge_gradients_both_modes() {
        let (base, lib, data) = small();
        let obj = MergeObjective { base: &base, library: &lib, train: &data, val: &data };
        check_grad(&obj, &random_logits(WeightMode::Global, 1, 3, 8));
        check_grad(&obj, &random_logits(WeightMode::PerLayer, 2, 3, 9));
    }

    #[test]
    fn single_expert_weights_stay_one() {
        let (base, lib, data) = small();
        let one = ExpertLibrary::new(vec![("x".into(), lib.get(0).clone())]).unwrap();
        let out = ExpertOutputs::compute(&base, &one, &data).unwrap();
        let (spec, _) =
            fit_ensemble_weights(&out, &out, EnsembleLevel::Probability, 0.0, &TrainHyper::default(), 0).unwrap();
        assert_eq!(spec.lambda(), &[1.0]);
    }

    #[test]
    fn identical_experts_flat_merge_objective() {
        let (base, lib, data) = small();
        let e = lib.get(1).clone();
        let same = ExpertLibrary::new(vec![("a".into(), e.clone()), ("b".into(), e)]).unwrap();
        let hyper = TrainHyper { epochs: 2, lr_grid: vec![1e-1], batch_size: 1, ..TrainHyper::default() };
        let (_, out) = fit_merge_weights(&base, &same, &data, &data, WeightMode::Global, &hyper, 0).unwrap();
        let first = out.step_losses[0];
        let per_item: Vec<f64> = out.step_losses.clone();
        assert!(per_item.iter().all(|l| l.is_finite()));
        assert_eq!(out.initial_train_loss, out.final_train_loss);
        assert!(first.is_finite());
    }

    #[test]
    fn distill_zero_epochs_returns_init() {
        let (base, lib, data) = small();
        let spec = EnsembleSpec::new(SimplexWeights::uniform(3, WeightMode::Global, 1).unwrap(), EnsembleLevel::Probability).unwrap();
        let hyper = TrainHyper { epochs: 0, ..TrainHyper::default() };
        let out = distill(&base, &lib, &spec, &data, &data, 0.0, &hyper, 5).unwrap();
        let init = LoraAdapter::init_for_training(&base, 2, 4.0, &mut Rng::derive(5, "distill/init")).unwrap();
        assert_eq!(out.student, init);
        assert_eq!(out.initial_kl, out.final_kl);
    }

    #[test]
    fn distill_gradient() {
        let (base, lib, data) = small();
        let spec = EnsembleSpec::new(SimplexWeights::global(&[0.2, 0.5, 0.3]).unwrap(), EnsembleLevel::Probability).unwrap();
        let q = teacher_targets(&base, &lib, &spec, &data).unwrap();
        let obj = AdapterObjective { base: &base, train: &data, val: &data, targets: Targets::Soft { train: q.clone(), val: q }, dropout: 0.0 };
        let student = lib.get(2).clone();
        let idx = [0, 1, 2];
        let (_, g) = obj.mean_loss_grad(&student, &idx).unwrap();
        let fd = finite_diff_grad(
            |x| {
                let mut s = student.clone();
                s.set_flat(x).unwrap();
                obj.mean_loss_grad(&s, &idx).unwrap().0
            },
            &student.flat(),
        )
        .unwrap();
        assert!(relative_error(&g.flat(), &fd) < 1e-4);
    }
}
