use serde::{Deserialize, Serialize};

use crate::analysis::Interval;
use crate::error::{Error, Result};

/// Accuracy of per-subject estimates against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `sqrt(mean((truth - estimate)^2))`; PEHE when the target is tau.
    pub rmse: f64,
    pub mean_abs_bias: f64,
    /// Fraction of intervals containing the truth.
    pub coverage: f64,
    pub width: f64,
}

/// Compares posterior means and intervals with the truth. Subjects whose
/// truth is NaN are skipped; with none left every metric is NaN.
pub fn evaluate_metrics(truth: &[f64], estimates: &[Interval]) -> Result<Metrics> {
    if truth.len() != estimates.len() {
        return Err(Error::Validation(format!(
            "{} true values for {} estimates",
            truth.len(),
            estimates.len()
        )));
    }
    let (mut n, mut sq, mut abs, mut cover, mut width) = (0usize, 0.0, 0.0, 0usize, 0.0);
    for (t, e) in truth.iter().zip(estimates) {
        if t.is_nan() {
            continue;
        }
        let err = t - e.mean;
        n += 1;
        sq += err * err;
        abs += err.abs();
        cover += e.contains(*t) as usize;
        width += e.width();
    }
    let n = n as f64;
    Ok(Metrics {
        rmse: (sq / n).sqrt(),
        mean_abs_bias: abs / n,
        coverage: cover as f64 / n,
        width: width / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn point(v: f64) -> Interval {
        Interval { mean: v, lo: v, hi: v }
    }

    #[test]
    fn perfect_estimates_score_zero() {
        let t = [0.3, -1.0, 2.0];
        let m = evaluate_metrics(&t, &t.map(point)).unwrap();
        assert_eq!((m.rmse, m.mean_abs_bias, m.coverage, m.width), (0.0, 0.0, 1.0, 0.0));
    }

    #[test]
    fn unit_errors_give_unit_pehe() {
        let m = evaluate_metrics(&[0.0, 0.0], &[point(1.0), point(-1.0)]).unwrap();
        assert_eq!(m.rmse, 1.0);
        assert_eq!(m.coverage, 0.0);
    }

    #[test]
    fn unbounded_intervals_always_cover() {
        let wide = Interval { mean: 5.0, lo: f64::NEG_INFINITY, hi: f64::INFINITY };
        let m = evaluate_metrics(&[1.0, -3.0], &[wide, wide]).unwrap();
        assert_eq!(m.coverage, 1.0);
    }

    #[test]
    fn length_mismatch_and_missing_truth() {
        assert!(evaluate_metrics(&[1.0], &[]).is_err());
        let m = evaluate_metrics(&[f64::NAN, 2.0], &[point(0.0), point(1.0)]).unwrap();
        assert_eq!(m.rmse, 1.0);
        assert!(evaluate_metrics(&[f64::NAN], &[point(0.0)]).unwrap().rmse.is_nan());
    }

    proptest! {
        #[test]
        fn agrees_with_naive_reference(
            rows in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, 0.0f64..3.0, 0.0f64..3.0), 1..60)
        ) {
            let truth: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let est: Vec<Interval> = rows
                .iter()
                .map(|r| Interval { mean: r.1, lo: r.1 - r.2, hi: r.1 + r.3 })
                .collect();
            let m = evaluate_metrics(&truth, &est).unwrap();
            let n = rows.len() as f64;
            let mut sq = 0.0;
            let mut ab = 0.0;
            let mut cov = 0.0;
            let mut wid = 0.0;
            for r in &rows {
                sq += (r.0 - r.1).powi(2);
                ab += (r.0 - r.1).abs();
                if r.1 - r.2 <= r.0 && r.0 <= r.1 + r.3 { cov += 1.0; }
                wid += r.2 + r.3;
            }
            prop_assert!((m.rmse - (sq / n).sqrt()).abs() < 1e-12);
            prop_assert!((m.mean_abs_bias - ab / n).abs() < 1e-12);
            prop_assert!((m.coverage - cov / n).abs() < 1e-12);
            prop_assert!((m.width - wid / n).abs() < 1e-12);
        }
    }
}
