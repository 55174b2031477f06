use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::scenario::TrueModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub r2: f64,
    pub bias_l2: f64,
    pub f1: f64,
}

/// `2TP / (2TP + FP + FN)` over the supports; one when both are empty.
pub fn f1_score(beta_hat: &[f64], beta0: &[f64]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (b, t) in beta_hat.iter().zip(beta0) {
        match (*b != 0.0, *t != 0.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Test-set MSE and R², estimation error, and support F1.
pub fn evaluate(
    beta_hat: &[f64],
    intercept: f64,
    truth: &TrueModel,
    test_x: &DMatrix<f64>,
    test_y: &DVector<f64>,
) -> Result<MetricsReport> {
    let p = truth.beta0.len();
    if beta_hat.len() != p || test_x.ncols() != p || test_x.nrows() != test_y.len() {
        return Err(Error::Shape("evaluate: inconsistent dimensions".into()));
    }
    let pred = test_x * DVector::from_column_slice(beta_hat);
    let resid = test_y - pred.add_scalar(intercept);
    let sse = resid.norm_squared();
    let n = test_y.len() as f64;
    let mean = test_y.mean();
    let sst: f64 = test_y.iter().map(|v| (v - mean).powi(2)).sum();
    let bias_l2 = beta_hat
        .iter()
        .zip(&truth.beta0)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(MetricsReport {
        mse: sse / n,
        r2: 1.0 - sse / sst,
        bias_l2,
        f1: f1_score(beta_hat, &truth.beta0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn truth() -> TrueModel {
        TrueModel {
            beta0: vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0],
            support: vec![0, 1, 2, 3, 4],
        }
    }

    #[test]
    fn perfect_recovery() {
        let t = truth();
        let x = DMatrix::from_fn(6, 7, |i, j| ((i * 7 + j) % 5) as f64 - 2.0 + (i as f64) * 0.1);
        let y = &x * DVector::from_column_slice(&t.beta0);
        let m = evaluate(&t.beta0, 0.0, &t, &x, &y).unwrap();
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.r2, 1.0);
        assert_eq!(m.bias_l2, 0.0);
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn f1_examples() {
        let t = truth();
        assert_eq!(f1_score(&[0.0; 7], &t.beta0), 0.0);
        // TP = 3, FP = 1, FN = 2
        let b = [1.0, 2.0, 3.0, 0.0, 0.0, 0.4, 0.0];
        assert_abs_diff_eq!(f1_score(&b, &t.beta0), 6.0 / 9.0, epsilon = 1e-15);
        assert_eq!(f1_score(&[0.0; 3], &[0.0; 3]), 1.0);
    }

    #[test]
    fn r2_is_consistent_with_mse() {
        let t = truth();
        let x = DMatrix::from_fn(9, 7, |i, j| ((i * 3 + j * 5) % 7) as f64 - 3.0);
        let y = DVector::from_fn(9, |i, _| i as f64 * 0.5 - 1.0);
        let b = [0.3, 0.0, -0.1, 0.0, 0.2, 0.0, 0.1];
        let m = evaluate(&b, 0.2, &t, &x, &y).unwrap();
        let mean = y.mean();
        let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        assert_abs_diff_eq!(m.r2, 1.0 - m.mse * 9.0 / sst, epsilon = 1e-12);
        assert!(m.r2 <= 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn f1_ignores_positive_rescaling(
                b in proptest::collection::vec(prop_oneof![Just(0.0), -2.0f64..2.0], 7),
                c in 0.01f64..100.0,
            ) {
                let t = truth();
                let scaled: Vec<f64> = b.iter().map(|v| v * c).collect();
                let f = f1_score(&b, &t.beta0);
                prop_assert_eq!(f, f1_score(&scaled, &t.beta0));
                prop_assert!((0.0..=1.0).contains(&f));
            }
        }
    }
}
