use crate::error::{Error, Result};

/// Probability clamp used by every cross-entropy in the crate.
pub const PROB_EPS: f64 = 1e-12;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Softmax without validation, for hot loops over already-checked values.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Backprop through softmax: given `p = softmax(z)` and `dL/dp`, returns `dL/dz`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect()
}

/// `−log(pred[target] + ε)` in nats.
pub fn cross_entropy(pred: &[f64], target: usize) -> Result<f64> {
    let p = pred.get(target).ok_or(Error::OutOfRange {
        index: target,
        size: pred.len(),
    })?;
    Ok(-(p + PROB_EPS).ln())
}

/// Soft-target cross-entropy `−Σ q log(p + ε)`.
pub fn soft_cross_entropy(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .filter(|(_, q)| **q > 0.0)
        .map(|(p, q)| -q * (p + PROB_EPS).ln())
        .sum()
}

/// `KL(q ‖ p)` with the same clamp.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(qi, pi)| qi * ((qi + PROB_EPS).ln() - (pi + PROB_EPS).ln()))
        .sum()
}

/// Central finite-difference gradient with step `1e-5`.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64]) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    const H: f64 = 1e-5;
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + H;
        let fp = f(&x);
        x[i] = orig - H;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        grad.push((fp - fm) / (2.0 * H));
    }
    Ok(grad)
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)` used by all gradient checks.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform_and_empty() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(softmax(&[]), Err(Error::EmptyLogits)));
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        // direct exp/sum with no max-subtraction; safe at this magnitude
        let z = [1.0f64, 2.0, 3.0];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let want: Vec<f64> = z.iter().map(|v| v.exp() / denom).collect();
        let got = softmax(&z).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        // frozen from extended-precision evaluation
        assert!((got[0] - 0.090_030_573_170_380_46).abs() < 1e-12);
        assert!((got[2] - 0.665_240_955_774_821_4).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_cases() {
        assert!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap() <= 1e-11);
        let v = 8;
        let uni = vec![1.0 / v as f64; v];
        assert!((cross_entropy(&uni, 3).unwrap() - (v as f64).ln()).abs() < 1e-10);
        assert!((cross_entropy(&[0.25, 0.75], 0).unwrap() - 4f64.ln()).abs() < 1e-10);
        assert!(cross_entropy(&[1.0], 1).is_err());
    }

    #[test]
    fn finite_diff_basic() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0]).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 2.5, &[1.0, -4.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(finite_diff_grad(|_| f64::NAN, &[1.0]).is_err());
    }

    #[test]
    fn softmax_ce_gradient_matches_p_minus_onehot() {
        let z = [0.3, -1.2, 2.0, 0.7, -0.1];
        let target = 2;
        let fd = finite_diff_grad(
            |x| cross_entropy(&softmax(x).unwrap(), target).unwrap(),
            &z,
        )
        .unwrap();
        let mut analytic = softmax(&z).unwrap();
        analytic[target] -= 1.0;
        assert!(relative_error(&fd, &analytic) < 1e-6);
    }

    proptest! {
        #[test]
        fn softmax_on_simplex(z in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
            let p = softmax(&z).unwrap();
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(z in proptest::collection::vec(-20f64..20.0, 1..10), c in -50f64..50.0) {
            let p = softmax(&z).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
