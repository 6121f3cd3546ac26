use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::eval::{loss_sum, Method};
use crate::error::{Error, Result};
use crate::expert::LoraAdapter;
use crate::fusion::{merge_factors, SimplexWeights};
use crate::lm::{BaseLm, Example};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationSweep {
    pub experts: (String, String),
    pub alphas: Vec<f64>,
    /// Token-mean loss on the concatenation of both tasks.
    pub combined: Vec<f64>,
    pub task1: Vec<f64>,
    pub task2: Vec<f64>,
    /// Each example scored under its own task's expert.
    pub oracle_ref: f64,
}

/// `(1 − α)·e1 + α·e2` factor-wise; `α = 0` and `α = 1` return the endpoints exactly.
pub fn interpolate(e1: &LoraAdapter, e2: &LoraAdapter, alpha: f64) -> Result<LoraAdapter> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("interpolation weight {alpha} outside [0, 1]")));
    }
    if !e1.same_layout(e2) || e1.fingerprint != e2.fingerprint {
        return Err(Error::Shape("interpolated experts differ in layout".into()));
    }
    Ok(merge_factors(&[e1, e2], &SimplexWeights::global(&[1.0 - alpha, alpha])?))
}

fn mean(parts: &[(f64, usize)]) -> f64 {
    let total: f64 = parts.iter().map(|p| p.0).sum();
    let count: usize = parts.iter().map(|p| p.1).sum();
    total / count.max(1) as f64
}

/// Evaluates the linear path between two experts on the union of their tasks.
pub fn interpolate_pair(
    base: &BaseLm,
    names: (&str, &str),
    e1: &LoraAdapter,
    e2: &LoraAdapter,
    alphas: &[f64],
    data1: &[Example],
    data2: &[Example],
) -> Result<InterpolationSweep> {
    if !alphas.contains(&0.0) || !alphas.contains(&1.0) {
        return Err(Error::Invalid("interpolation grid must include 0 and 1".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Invalid(format!("interpolation weight {a} outside [0, 1]")));
    }
    if data1.is_empty() || data2.is_empty() {
        return Err(Error::EmptyData("interpolation needs data for both tasks".into()));
    }
    let mut sweep = InterpolationSweep {
        experts: (names.0.to_string(), names.1.to_string()),
        alphas: alphas.to_vec(),
        combined: Vec::new(),
        task1: Vec::new(),
        task2: Vec::new(),
        oracle_ref: 0.0,
    };
    for &a in alphas {
        let m = interpolate(e1, e2, a)?;
        let l1 = loss_sum(base, Method::Adapter(&m), data1)?;
        let l2 = loss_sum(base, Method::Adapter(&m), data2)?;
        sweep.combined.push(mean(&[l1, l2]));
        sweep.task1.push(mean(&[l1]));
        sweep.task2.push(mean(&[l2]));
    }
    let o1 = loss_sum(base, Method::Adapter(e1), data1)?;
    let o2 = loss_sum(base, Method::Adapter(e2), data2)?;
    sweep.oracle_ref = mean(&[o1, o2]);
    Ok(sweep)
}

/// Loss of a single adapter on the concatenation of `parts`, computed the same way
/// as the sweep's combined column.
pub fn combined_loss(base: &BaseLm, adapter: &LoraAdapter, parts: &[&[Example]]) -> Result<f64> {
    let sums = parts
        .iter()
        .map(|d| loss_sum(base, Method::Adapter(adapter), d))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&sums))
}

impl InterpolationSweep {
    pub fn min_combined(&self) -> f64 {
        self.combined.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["alpha", "combined_loss", "task1_loss", "task2_loss", "oracle_ref"])?;
        for i in 0..self.alphas.len() {
            w.write_record([
                format!("{:?}", self.alphas[i]),
                format!("{:?}", self.combined[i]),
                format!("{:?}", self.task1[i]),
                format!("{:?}", self.task2[i]),
                format!("{:?}", self.oracle_ref),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;
    use crate::numerics::{Params, Rng};

    fn setup() -> (BaseLm, LoraAdapter, LoraAdapter, Vec<Example>, Vec<Example>) {
        let base = BaseLm::build(
            LmConfig { vocab: 10, width: 8, layers: 2, heads: 2, ffn: 8, max_len: 12 },
            &mut Rng::new(3),
        )
        .unwrap();
        let mut rng = Rng::new(1);
        let mut mk = || {
            let mut a = LoraAdapter::zeros(&base, 2, 4.0).unwrap();
            for v in a.blocks_mut().into_iter().flatten() {
                *v = 0.3 * rng.normal();
            }
            a
        };
        let (e1, e2) = (mk(), mk());
        let d1 = vec![Example::new(vec![2, 3], vec![3, 2]), Example::new(vec![4, 4, 5], vec![5, 4, 4])];
        let d2 = vec![Example::new(vec![6, 7, 8], vec![8])];
        (base, e1, e2, d1, d2)
    }

    #[test]
    fn endpoints_bit_match() {
        let (base, e1, e2, d1, d2) = setup();
        let s = interpolate_pair(&base, ("a", "b"), &e1, &e2, &[0.0, 0.5, 1.0], &d1, &d2).unwrap();
        assert_eq!(s.combined[0], combined_loss(&base, &e1, &[&d1, &d2]).unwrap());
        assert_eq!(s.combined[2], combined_loss(&base, &e2, &[&d1, &d2]).unwrap());
    }

    #[test]
    fn identical_pair_is_flat() {
        let (base, e1, _, d1, d2) = setup();
        let s = interpolate_pair(&base, ("a", "a"), &e1, &e1, &[0.0, 0.3, 0.7, 1.0], &d1, &d2).unwrap();
        let (lo, hi) = s.combined.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
        assert!(hi - lo <= 1e-12);
    }

    #[test]
    fn bad_grids() {
        let (base, e1, e2, d1, d2) = setup();
        assert!(interpolate_pair(&base, ("a", "b"), &e1, &e2, &[0.0, 0.5], &d1, &d2).is_err());
        assert!(interpolate_pair(&base, ("a", "b"), &e1, &e2, &[0.0, 1.0, 1.5], &d1, &d2).is_err());
    }

    #[test]
    fn csv_columns() {
        let (base, e1, e2, d1, d2) = setup();
        let s = interpolate_pair(&base, ("a", "b"), &e1, &e2, &[0.0, 1.0], &d1, &d2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        s.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("alpha,combined_loss,task1_loss,task2_loss,oracle_ref\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
