//! Truncated SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns are orthogonalized over the smaller dimension of the input, so the
//! implicit Gram matrix is `min(rows, cols)` square. Sweep order is fixed,
//! which makes the decomposition bit-reproducible.

use crate::error::{Error, Result};
use crate::numerics::matrix::{dot, Matrix};

const MAX_SWEEPS: usize = 80;
const ORTH_TOL: f64 = 1e-15;

#[derive(Clone, Debug)]
pub struct Svd {
    /// `rows × k`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub s: Vec<f64>,
    /// `cols × k`, orthonormal columns; first nonzero entry of each column is non-negative.
    pub v: Matrix,
}

impl Svd {
    /// `U · diag(S) · Vᵀ`
    pub fn reconstruct(&self) -> Matrix {
        let (n, k) = self.u.shape();
        let m = self.v.rows();
        Matrix::from_fn(n, m, |i, j| {
            (0..k).map(|c| self.u[(i, c)] * self.s[c] * self.v[(j, c)]).sum()
        })
    }
}

/// Top-`k` singular triplets of `m`.
pub fn svd_top(m: &Matrix, k: usize) -> Result<Svd> {
    let (rows, cols) = m.shape();
    if k == 0 {
        return Err(Error::Invalid("svd rank k must be at least 1".into()));
    }
    if k > rows.min(cols) {
        return Err(Error::Invalid(format!(
            "svd rank {k} exceeds min dimension of {rows}x{cols}"
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    let transposed = cols > rows;
    let work = if transposed { m.transpose() } else { m.clone() };
    let (left, s, right) = jacobi_columns(&work, k)?;
    let (u, mut v) = if transposed { (right, left) } else { (left, right) };
    let mut u = u;
    fix_signs(&mut u, &mut v);
    Ok(Svd { u, s, v })
}

/// One-sided Jacobi on the columns of a tall (`n ≥ p`) matrix.
/// Returns `(U n×k, S, V p×k)` with `A·V = U·diag(S)`.
fn jacobi_columns(a: &Matrix, k: usize) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (n, p) = a.shape();
    // column-major copies so rotations touch contiguous memory
    let mut cols: Vec<Vec<f64>> = (0..p).map(|j| a.col(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..p)
        .map(|j| {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = false;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        residual = 0.0f64;
        for i in 0..p {
            for j in (i + 1)..p {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= ORTH_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut vcols, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let mut order: Vec<(usize, f64)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (j, dot(c, c).sqrt()))
        .collect();
    // descending by value, stable on index
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut u = Matrix::zeros(n, k);
    let mut v = Matrix::zeros(p, k);
    let mut s = Vec::with_capacity(k);
    let scale = order.first().map_or(0.0, |o| o.1);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for (c, &(j, sigma)) in order.iter().take(k).enumerate() {
        let mut uc = if sigma > 1e-13 * scale.max(f64::MIN_POSITIVE) {
            cols[j].iter().map(|x| x / sigma).collect()
        } else {
            // rank-deficient: complete U with an orthonormal direction
            complete_basis(&ucols, n)
        };
        let sigma = if sigma > 1e-13 * scale.max(f64::MIN_POSITIVE) { sigma } else { 0.0 };
        normalize(&mut uc);
        for r in 0..n {
            u[(r, c)] = uc[r];
        }
        for r in 0..p {
            v[(r, c)] = vcols[j][r];
        }
        ucols.push(uc);
        s.push(sigma);
    }
    Ok((u, s, v))
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let (ci, cj) = (&mut lo[i], &mut hi[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let xi = *x;
        let yj = *y;
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn complete_basis(existing: &[Vec<f64>], n: usize) -> Vec<f64> {
    for e in 0..n {
        let mut cand = vec![0.0; n];
        cand[e] = 1.0;
        for q in existing {
            let d = dot(&cand, q);
            cand.iter_mut().zip(q).for_each(|(c, qi)| *c -= d * qi);
        }
        if dot(&cand, &cand).sqrt() > 1e-6 {
            normalize(&mut cand);
            return cand;
        }
    }
    vec![0.0; n]
}

fn fix_signs(u: &mut Matrix, v: &mut Matrix) {
    for c in 0..v.cols() {
        let first = (0..v.rows()).map(|r| v[(r, c)]).find(|x| x.abs() > 1e-14);
        if matches!(first, Some(x) if x < 0.0) {
            for r in 0..v.rows() {
                v[(r, c)] = -v[(r, c)];
            }
            for r in 0..u.rows() {
                u[(r, c)] = -u[(r, c)];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;

    fn orthonormality_error(m: &Matrix) -> f64 {
        let g = m.transpose().matmul(m).unwrap();
        g.max_abs_diff(&Matrix::identity(m.cols()))
    }

    #[test]
    fn diagonal_matrix() {
        let m = Matrix::from_rows(&[
            vec![3.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let svd = svd_top(&m, 3).unwrap();
        assert_eq!(svd.s, vec![3.0, 2.0, 1.0]);
        assert!(svd.v.max_abs_diff(&Matrix::identity(3)) < 1e-15);
        assert!(svd.u.max_abs_diff(&Matrix::identity(3)) < 1e-15);
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [-0.5, 1.5, 2.0];
        let mut m = Matrix::zeros(4, 3);
        m.add_outer(1.0, &u, &v);
        let svd = svd_top(&m, 1).unwrap();
        let nu = dot(&u, &u).sqrt();
        let nv = dot(&v, &v).sqrt();
        assert!((svd.s[0] - nu * nv).abs() < 1e-12);
        // sign convention makes the first entry non-negative
        for (j, vj) in v.iter().enumerate() {
            assert!((svd.v[(j, 0)] + vj / nv).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_matrix_and_errors() {
        let mut rng = Rng::new(3);
        let m = Matrix::from_fn(3, 7, |_, _| rng.normal());
        let svd = svd_top(&m, 3).unwrap();
        assert!(svd.reconstruct().max_abs_diff(&m) < 1e-12);
        assert!(orthonormality_error(&svd.u) < 1e-12);
        assert!(orthonormality_error(&svd.v) < 1e-12);
        assert!(svd_top(&m, 0).is_err());
        assert!(svd_top(&m, 4).is_err());
    }

    #[test]
    fn rank_deficient_completes_u() {
        let mut m = Matrix::zeros(5, 3);
        m.add_outer(1.0, &[1.0, 0.0, 2.0, 0.0, 1.0], &[0.0, 1.0, 1.0]);
        let svd = svd_top(&m, 3).unwrap();
        assert!(svd.s[1] == 0.0 && svd.s[2] == 0.0);
        assert!(orthonormality_error(&svd.u) < 1e-10);
        assert!(orthonormality_error(&svd.v) < 1e-10);
    }

    #[test]
    fn singular_values_of_transpose_agree() {
        let mut rng = Rng::new(11);
        let m = Matrix::from_fn(6, 4, |_, _| rng.normal());
        let a = svd_top(&m, 4).unwrap();
        let b = svd_top(&m.transpose(), 4).unwrap();
        for (x, y) in a.s.iter().zip(&b.s) {
            assert!((x - y).abs() < 1e-8);
        }
        assert!(a.s.windows(2).all(|w| w[0] >= w[1]));
    }
}
