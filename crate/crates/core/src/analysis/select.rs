use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionCurve {
    /// Experts in the order they were added.
    pub selected: Vec<usize>,
    /// Task-level oracle loss of each prefix of `selected`.
    pub values: Vec<f64>,
}

/// `mean_t min_{i ∈ subset} M[i][t]`.
pub fn subset_value(m: &Matrix, subset: &[usize]) -> f64 {
    let mut total = 0.0;
    for t in 0..m.cols() {
        let best = subset.iter().map(|&i| m[(i, t)]).fold(f64::INFINITY, f64::min);
        total += best;
    }
    total / m.cols() as f64
}

/// Mean over tasks of the column-wise best expert.
pub fn full_oracle_value(m: &Matrix) -> f64 {
    let all: Vec<usize> = (0..m.rows()).collect();
    subset_value(m, &all)
}

/// Greedy forward selection of experts under task-level routing.
pub fn greedy_select(m: &Matrix, k_max: usize) -> Result<SelectionCurve> {
    let n = m.rows();
    if n == 0 || m.cols() == 0 {
        return Err(Error::EmptyData("empty error matrix".into()));
    }
    if k_max == 0 || k_max > n {
        return Err(Error::Invalid(format!("k_max {k_max} outside 1..={n}")));
    }
    let mut selected: Vec<usize> = Vec::with_capacity(k_max);
    let mut values = Vec::with_capacity(k_max);
    while selected.len() < k_max {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if selected.contains(&i) {
                continue;
            }
            let mut trial = selected.clone();
            trial.push(i);
            let v = subset_value(m, &trial);
            if best.is_none_or(|(_, bv)| v < bv) {
                best = Some((i, v));
            }
        }
        let (i, v) = best.expect("an unselected expert remains");
        selected.push(i);
        values.push(v);
    }
    Ok(SelectionCurve { selected, values })
}

impl SelectionCurve {
    /// Values of the same prefixes on another matrix (e.g. the test split).
    pub fn rescore(&self, m: &Matrix) -> Vec<f64> {
        (1..=self.selected.len()).map(|k| subset_value(m, &self.selected[..k])).collect()
    }

    pub fn is_monotone(&self) -> bool {
        self.values.windows(2).all(|w| w[1] <= w[0])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path, extra: Option<(&str, &[f64])>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["k".to_string(), "expert".to_string(), "value".to_string()];
        if let Some((name, _)) = extra {
            header.push(name.to_string());
        }
        w.write_record(&header)?;
        for (j, (&e, &v)) in self.selected.iter().zip(&self.values).enumerate() {
            let mut rec = vec![(j + 1).to_string(), e.to_string(), format!("{v:?}")];
            if let Some((_, vals)) = extra {
                rec.push(format!("{:?}", vals[j]));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn full_selection_reaches_oracle() {
        let mut rng = Rng::new(3);
        let m = Matrix::from_fn(5, 7, |_, _| rng.uniform());
        let c = greedy_select(&m, 5).unwrap();
        assert_eq!(*c.values.last().unwrap(), full_oracle_value(&m));
        assert!(c.is_monotone());
    }

    #[test]
    fn dominant_expert_flat_curve() {
        let m = Matrix::from_rows(&[vec![2.0, 2.0], vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap();
        let c = greedy_select(&m, 3).unwrap();
        assert_eq!(c.selected[0], 1);
        assert!(c.values.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn first_pick_minimizes_row_mean() {
        let m = Matrix::from_rows(&[vec![0.0, 10.0], vec![4.0, 4.0], vec![10.0, 0.0]]).unwrap();
        let c = greedy_select(&m, 2).unwrap();
        assert_eq!(c.selected, vec![1, 0]);
        assert_eq!(c.values, vec![4.0, 2.0]);
    }

    #[test]
    fn bad_k() {
        let m = Matrix::zeros(2, 2);
        assert!(greedy_select(&m, 0).is_err());
        assert!(greedy_select(&m, 3).is_err());
    }
}
