//! Minimax expert weighting over an expert × task error matrix, solved exactly as
//! a linear program with a dense two-phase simplex method.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const PIVOT_EPS: f64 = 1e-12;
const MAX_PIVOTS: usize = 100_000;

/// Loss of expert `i` (row) on task `t` (column).
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMatrix {
    pub experts: Vec<String>,
    pub tasks: Vec<String>,
    pub values: Matrix,
}

impl ErrorMatrix {
    pub fn new(experts: Vec<String>, tasks: Vec<String>, values: Matrix) -> Result<Self> {
        if values.shape() != (experts.len(), tasks.len()) {
            return Err(Error::Shape(format!(
                "error matrix {:?} for {} experts and {} tasks",
                values.shape(),
                experts.len(),
                tasks.len()
            )));
        }
        if experts.is_empty() || tasks.is_empty() {
            return Err(Error::EmptyData("error matrix has no entries".into()));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("error matrix entry".into()));
        }
        Ok(Self { experts, tasks, values })
    }

    /// CSV with a header `expert,<task>...` and one row per expert.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["expert".to_string()];
        header.extend(self.tasks.iter().cloned());
        w.write_record(&header)?;
        for (i, e) in self.experts.iter().enumerate() {
            let mut rec = vec![e.clone()];
            rec.extend(self.values.row(i).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path)?;
        let tasks: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
        let mut experts = Vec::new();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            experts.push(rec.get(0).unwrap_or_default().to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Invalid(format!("bad number `{s}`"))))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::EmptyData("error matrix has no rows".into()));
        }
        Self::new(experts, tasks, Matrix::from_rows(&rows)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MinimaxSolution {
    pub lambda: Vec<f64>,
    /// `max_t Σ_i λ_i M[i,t]`
    pub value: f64,
    /// Experts with positive weight.
    pub support: Vec<usize>,
}

/// Worst-task loss of a coefficient vector.
pub fn worst_case(m: &Matrix, lambda: &[f64]) -> f64 {
    (0..m.cols())
        .map(|t| (0..m.rows()).map(|i| lambda[i] * m[(i, t)]).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Solves `min_{λ ∈ Δ, c} c  s.t.  λᵀ M[:,t] ≤ c  ∀t`.
pub fn lp_minimax_weights(errors: &ErrorMatrix) -> Result<MinimaxSolution> {
    let m = &errors.values;
    let (n, t) = m.shape();
    let shift = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    // variables: λ_0..λ_{n-1}, c', slack_0..slack_{t-1}; c = c' + shift
    let nv = n + 1 + t;
    let mut a = Matrix::zeros(t + 1, nv);
    let mut b = vec![0.0; t + 1];
    for j in 0..t {
        for i in 0..n {
            a[(j, i)] = m[(i, j)] - shift;
        }
        a[(j, n)] = -1.0;
        a[(j, n + 1 + j)] = 1.0;
    }
    for i in 0..n {
        a[(t, i)] = 1.0;
    }
    b[t] = 1.0;
    let mut cost = vec![0.0; nv];
    cost[n] = 1.0;
    let x = simplex_standard_form(&a, &b, &cost)?;
    let mut lambda: Vec<f64> = x[..n].iter().map(|v| v.max(0.0)).collect();
    let z: f64 = lambda.iter().sum();
    lambda.iter_mut().for_each(|v| *v /= z);
    let value = worst_case(m, &lambda);
    let support = (0..n).filter(|&i| lambda[i] > 0.0).collect();
    Ok(MinimaxSolution { lambda, value, support })
}

/// `min cᵀx  s.t.  A x = b, x ≥ 0` with `b ≥ 0`, by the two-phase tableau method
/// and Bland's anti-cycling rule. Returns an optimal basic solution.
pub fn simplex_standard_form(a: &Matrix, b: &[f64], cost: &[f64]) -> Result<Vec<f64>> {
    let (rows, nv) = a.shape();
    if b.len() != rows || cost.len() != nv {
        return Err(Error::Shape("linear program dimensions disagree".into()));
    }
    if b.iter().any(|v| *v < 0.0) {
        return Err(Error::Invalid("right-hand side must be non-negative".into()));
    }
    // tableau columns: originals, artificials, rhs
    let width = nv + rows + 1;
    let mut tab = Matrix::zeros(rows, width);
    for r in 0..rows {
        tab.row_mut(r)[..nv].copy_from_slice(a.row(r));
        tab[(r, nv + r)] = 1.0;
        tab[(r, width - 1)] = b[r];
    }
    let mut basis: Vec<usize> = (nv..nv + rows).collect();

    let mut phase1 = vec![0.0; nv + rows];
    phase1[nv..].iter_mut().for_each(|v| *v = 1.0);
    run_simplex(&mut tab, &mut basis, &phase1, nv + rows)?;
    let infeas: f64 = basis
        .iter()
        .enumerate()
        .filter(|(_, &j)| j >= nv)
        .map(|(r, _)| tab[(r, width - 1)])
        .sum();
    if infeas > 1e-9 {
        return Err(Error::Invalid("linear program is infeasible".into()));
    }
    // drive remaining artificials out of the basis
    let mut keep = vec![true; rows];
    for r in 0..rows {
        if basis[r] < nv {
            continue;
        }
        match (0..nv).find(|&j| tab[(r, j)].abs() > PIVOT_EPS) {
            Some(j) => {
                pivot(&mut tab, r, j);
                basis[r] = j;
            }
            None => keep[r] = false,
        }
    }
    let mut cost2 = cost.to_vec();
    cost2.extend(std::iter::repeat_n(0.0, rows));
    let kept: Vec<usize> = (0..rows).filter(|&r| keep[r]).collect();
    let mut tab2 = Matrix::zeros(kept.len(), width);
    let mut basis2 = Vec::with_capacity(kept.len());
    for (k, &r) in kept.iter().enumerate() {
        tab2.row_mut(k).copy_from_slice(tab.row(r));
        // artificial columns may no longer enter
        for j in nv..nv + rows {
            tab2[(k, j)] = 0.0;
        }
        basis2.push(basis[r]);
    }
    run_simplex(&mut tab2, &mut basis2, &cost2, nv)?;
    let mut x = vec![0.0; nv];
    for (r, &j) in basis2.iter().enumerate() {
        if j < nv {
            x[j] = tab2[(r, width - 1)];
        }
    }
    Ok(x)
}

/// Iterates to optimality; only columns `< allowed` may enter.
fn run_simplex(tab: &mut Matrix, basis: &mut [usize], cost: &[f64], allowed: usize) -> Result<()> {
    let (rows, width) = tab.shape();
    let rhs = width - 1;
    for _ in 0..MAX_PIVOTS {
        // reduced costs, Bland: lowest index with negative value enters
        let mut entering = None;
        for j in 0..allowed {
            if basis.contains(&j) {
                continue;
            }
            let mut rc = cost[j];
            for r in 0..rows {
                rc -= cost[basis[r]] * tab[(r, j)];
            }
            if rc < -PIVOT_EPS {
                entering = Some(j);
                break;
            }
        }
        let Some(j) = entering else {
            return Ok(());
        };
        let mut leave: Option<(usize, f64)> = None;
        for r in 0..rows {
            let a = tab[(r, j)];
            if a > PIVOT_EPS {
                let ratio = tab[(r, rhs)] / a;
                leave = match leave {
                    None => Some((r, ratio)),
                    Some((lr, lratio)) => {
                        if ratio < lratio - PIVOT_EPS
                            || ((ratio - lratio).abs() <= PIVOT_EPS && basis[r] < basis[lr])
                        {
                            Some((r, ratio))
                        } else {
                            Some((lr, lratio))
                        }
                    }
                };
            }
        }
        let Some((r, _)) = leave else {
            return Err(Error::Invalid("linear program is unbounded".into()));
        };
        pivot(tab, r, j);
        basis[r] = j;
    }
    Err(Error::NoConvergence {
        sweeps: MAX_PIVOTS,
        residual: f64::NAN,
    })
}

fn pivot(tab: &mut Matrix, r: usize, j: usize) {
    let (rows, width) = tab.shape();
    let p = tab[(r, j)];
    tab.row_mut(r).iter_mut().for_each(|v| *v /= p);
    let prow = tab.row(r).to_vec();
    for k in 0..rows {
        if k == r {
            continue;
        }
        let f = tab[(k, j)];
        if f != 0.0 {
            let row = tab.row_mut(k);
            for c in 0..width {
                row[c] -= f * prow[c];
            }
            row[j] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn em(rows: &[Vec<f64>]) -> ErrorMatrix {
        let m = Matrix::from_rows(rows).unwrap();
        ErrorMatrix::new(
            (0..m.rows()).map(|i| format!("e{i}")).collect(),
            (0..m.cols()).map(|t| format!("t{t}")).collect(),
            m,
        )
        .unwrap()
    }

    #[test]
    fn two_by_two_example() {
        let s = lp_minimax_weights(&em(&[vec![1.0, 3.0], vec![3.0, 1.0]])).unwrap();
        assert!((s.lambda[0] - 0.5).abs() <= 1e-9);
        assert!((s.lambda[1] - 0.5).abs() <= 1e-9);
        assert!((s.value - 2.0).abs() <= 1e-9);
    }

    #[test]
    fn dominant_expert_gets_all_weight() {
        let s = lp_minimax_weights(&em(&[vec![0.5, 0.7, 0.2], vec![1.0, 2.0, 0.9]])).unwrap();
        assert_eq!(s.lambda, vec![1.0, 0.0]);
        assert_eq!(s.support, vec![0]);
        assert!((s.value - 0.7).abs() <= 1e-12);
    }

    #[test]
    fn single_task_and_single_expert() {
        let s = lp_minimax_weights(&em(&[vec![3.0], vec![1.0], vec![2.0]])).unwrap();
        assert_eq!(s.lambda, vec![0.0, 1.0, 0.0]);
        let s = lp_minimax_weights(&em(&[vec![3.0, 4.0]])).unwrap();
        assert_eq!(s.lambda, vec![1.0]);
        assert_eq!(s.value, 4.0);
    }

    #[test]
    fn degenerate_ties_terminate() {
        let s = lp_minimax_weights(&em(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]])).unwrap();
        assert!((s.value - 1.0).abs() <= 1e-12);
        assert!((s.lambda.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let e = em(&[vec![0.1, 2.5], vec![1.0 / 3.0, 4.0]]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        e.write_csv(&p).unwrap();
        assert_eq!(ErrorMatrix::read_csv(&p).unwrap(), e);
        assert!(matches!(
            ErrorMatrix::read_csv(&dir.path().join("nope.csv")),
            Err(Error::MissingFile(_))
        ));
    }

    /// Brute-force minimum over a simplex grid with `steps` subdivisions.
    fn grid_min(m: &Matrix, steps: usize) -> f64 {
        fn rec(m: &Matrix, steps: usize, i: usize, left: usize, lam: &mut Vec<f64>, best: &mut f64) {
            if i + 1 == m.rows() {
                lam[i] = left as f64 / steps as f64;
                *best = best.min(worst_case(m, lam));
                return;
            }
            for k in 0..=left {
                lam[i] = k as f64 / steps as f64;
                rec(m, steps, i + 1, left - k, lam, best);
            }
        }
        let mut best = f64::INFINITY;
        rec(m, steps, 0, steps, &mut vec![0.0; m.rows()], &mut best);
        best
    }

    #[test]
    fn random_matrices_beat_grid_search() {
        let mut rng = Rng::new(17);
        for _ in 0..20 {
            let n = rng.range_inclusive(2, 3);
            let t = rng.range_inclusive(1, 5);
            let m = Matrix::from_fn(n, t, |_, _| 0.5 + 3.0 * rng.uniform());
            let s = lp_minimax_weights(&em(&(0..n).map(|i| m.row(i).to_vec()).collect::<Vec<_>>())).unwrap();
            assert!(s.value <= grid_min(&m, 60) + 1e-9);
            assert!((s.value - worst_case(&m, &s.lambda)).abs() <= 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn solution_on_simplex_and_no_vertex_better(
            vals in proptest::collection::vec(0.0f64..5.0, 12),
            n in 1usize..=4,
        ) {
            let t = 12 / n.max(1);
            let t = t.min(3).max(1);
            let m = Matrix::from_fn(n, t, |i, j| vals[i * t + j]);
            let s = lp_minimax_weights(&em(&(0..n).map(|i| m.row(i).to_vec()).collect::<Vec<_>>())).unwrap();
            prop_assert!(s.lambda.iter().all(|v| *v >= 0.0));
            prop_assert!((s.lambda.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for k in 0..n {
                let mut e = vec![0.0; n];
                e[k] = 1.0;
                prop_assert!(s.value <= worst_case(&m, &e) + 1e-7);
            }
        }
    }
}
