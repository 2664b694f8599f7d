//! Link functions and guarded logarithms.

use ndarray::{Array2, ArrayViewMut1};

use crate::error::{Error, Result};

/// Probability clamp used for every log/logit conversion.
pub const DEFAULT_EPSILON: f64 = 1e-7;

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Elementwise sigmoid.
pub fn sigmoid_mat(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(sigmoid)
}

/// Log-odds of a clamped probability.
pub fn logit(p: f64, epsilon: f64) -> f64 {
    let p = p.clamp(epsilon, 1.0 - epsilon);
    (p / (1.0 - p)).ln()
}

/// In-place softmax with max-subtraction.
pub fn softmax_row(mut row: ArrayViewMut1<'_, f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax.
pub fn softmax_mat(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for row in out.rows_mut() {
        softmax_row(row);
    }
    out
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::Config(format!(
            "epsilon must lie in (0, 0.5), got {epsilon}"
        )));
    }
    Ok(())
}

/// `log(clamp(p, epsilon, 1 - epsilon))` for a single probability.
pub fn safe_log_scalar(p: f64, epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    Ok(p.clamp(epsilon, 1.0 - epsilon).ln())
}

/// Elementwise guarded logarithm of a probability matrix.
pub fn safe_log(p: &Array2<f64>, epsilon: f64) -> Result<Array2<f64>> {
    check_epsilon(epsilon)?;
    Ok(p.mapv(|v| v.clamp(epsilon, 1.0 - epsilon).ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_symmetry_and_saturation() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(50.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-50.0) < 1e-15);
        // 1/(1+e^(-5/3)), pinned from an arbitrary-precision evaluation
        assert_abs_diff_eq!(sigmoid(5.0 / 3.0), 0.841130895119084849, epsilon = 1e-15);
    }

    #[test]
    fn softmax_uniform_and_pinned_values() {
        let m = softmax_mat(&array![[0.0, 0.0, 0.0, 0.0]]);
        for v in m.iter() {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-15);
        }
        let m = softmax_mat(&array![[1.0, 2.0, 3.0]]);
        let expected = [0.090030573170380458, 0.244728471054797652, 0.665240955774821890];
        for (v, e) in m.iter().zip(expected) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-5);
        }
    }

    #[test]
    fn softmax_shift_matches_unshifted() {
        let a = softmax_mat(&array![[7.25, 8.25]]);
        let b = softmax_mat(&array![[0.0, 1.0]]);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn safe_log_clamps_both_ends() {
        let m = array![[0.0, 0.5, 1.0]];
        let out = safe_log(&m, 1e-7).unwrap();
        assert_abs_diff_eq!(out[[0, 0]], (1e-7f64).ln(), epsilon = 0.0);
        assert_abs_diff_eq!(out[[0, 1]], -0.693147180559945309, epsilon = 1e-9);
        // log(1-eps) ~ -eps: series check |out + eps| < eps^2
        assert!((out[[0, 2]] + 1e-7).abs() < 1e-14);
    }

    #[test]
    fn safe_log_rejects_bad_epsilon() {
        assert!(safe_log(&array![[0.5]], 0.0).is_err());
        assert!(safe_log(&array![[0.5]], 0.5).is_err());
        assert!(safe_log(&array![[0.5]], -1.0).is_err());
    }

    proptest! {
        #[test]
        fn sigmoid_inverts_logit(p in 1e-6f64..=0.999999f64) {
            let z = logit(p, 1e-9);
            prop_assert!((sigmoid(z) - p).abs() < 1e-12);
        }

        #[test]
        fn softmax_shift_invariance(z0 in -5.0f64..5.0, z1 in -5.0f64..5.0, z2 in -5.0f64..5.0, c in -30.0f64..30.0) {
            let base = softmax_mat(&array![[z0, z1, z2]]);
            let shifted = softmax_mat(&array![[z0 + c, z1 + c, z2 + c]]);
            for (a, b) in base.iter().zip(shifted.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one(z0 in -30.0f64..30.0, z1 in -30.0f64..30.0) {
            let m = softmax_mat(&array![[z0, z1]]);
            let s: f64 = m.row(0).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(m.iter().all(|v| *v > 0.0));
        }
    }
}
