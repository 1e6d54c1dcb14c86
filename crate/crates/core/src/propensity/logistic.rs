use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::Design;

const MAX_ITER: usize = 100;
const TOL: f64 = 1e-10;

/// Maximum-likelihood logistic regression with an intercept.
///
/// Missing covariate cells are replaced by the column mean of the fitting
/// rows, and columns that are constant after imputation are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    /// Design columns used, in coefficient order after the intercept.
    pub columns: Vec<usize>,
    /// Imputation value for each used column.
    pub means: Vec<f64>,
    /// Intercept first.
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub n_features: usize,
}

impl LogisticModel {
    pub fn fit(design: &Design, z: &[Option<bool>]) -> Result<Self> {
        let rows: Vec<usize> = (0..z.len()).filter(|&i| z[i].is_some()).collect();
        let y: Vec<f64> = rows.iter().map(|&i| z[i] == Some(true)) .map(|b| b as u8 as f64).collect();

        let mut columns = Vec::new();
        let mut means = Vec::new();
        for f in 0..design.n_features() {
            let col = design.column(f);
            let (sum, n) = rows
                .iter()
                .map(|&i| col[i])
                .filter(|v| !v.is_nan())
                .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            if n == 0 {
                continue;
            }
            let mean = sum / n as f64;
            let first = impute(col[rows[0]], mean);
            if rows.iter().all(|&i| impute(col[i], mean) == first) {
                continue;
            }
            columns.push(f);
            means.push(mean);
        }

        let p = columns.len() + 1;
        let x = DMatrix::from_fn(rows.len(), p, |r, c| {
            if c == 0 {
                1.0
            } else {
                impute(design.value(rows[r], columns[c - 1]), means[c - 1])
            }
        });
        let y = DVector::from_vec(y);

        let mut beta = DVector::zeros(p);
        let ybar = y.mean();
        beta[0] = (ybar / (1.0 - ybar)).ln();
        let mut info = DMatrix::zeros(p, p);
        for _ in 0..MAX_ITER {
            let eta = &x * &beta;
            let mu = eta.map(expit);
            let w = mu.map(|m| (m * (1.0 - m)).max(1e-12));
            let grad = x.transpose() * (&y - &mu);
            let mut xw = x.clone();
            for (mut row, wi) in xw.row_iter_mut().zip(w.iter()) {
                row *= *wi;
            }
            info = x.transpose() * xw;
            let step = solve_spd(&info, &grad)?;
            beta += &step;
            if step.amax() < TOL {
                break;
            }
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Validation(
                "logistic propensity fit diverged (separated data?)".into(),
            ));
        }
        let cov = info
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Validation("singular logistic information matrix".into()))?;
        Ok(LogisticModel {
            columns,
            means,
            coefficients: beta.iter().copied().collect(),
            standard_errors: (0..p).map(|k| cov[(k, k)].sqrt()).collect(),
            n_features: design.n_features(),
        })
    }

    /// Unclipped probabilities for every row.
    pub fn score(&self, design: &Design) -> Result<Vec<f64>> {
        if design.n_features() != self.n_features {
            return Err(Error::Schema(format!(
                "logistic propensity model expects {} columns, got {}",
                self.n_features,
                design.n_features()
            )));
        }
        Ok((0..design.n_rows())
            .map(|r| {
                let eta = self.columns.iter().zip(&self.means).enumerate().fold(
                    self.coefficients[0],
                    |acc, (k, (&f, &m))| acc + self.coefficients[k + 1] * impute(design.value(r, f), m),
                );
                expit(eta)
            })
            .collect())
    }
}

#[inline]
fn impute(v: f64, mean: f64) -> f64 {
    if v.is_nan() {
        mean
    } else {
        v
    }
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(c) = a.clone().cholesky() {
        return Ok(c.solve(b));
    }
    let ridge = a + DMatrix::identity(a.nrows(), a.ncols()) * 1e-8;
    ridge
        .cholesky()
        .map(|c| c.solve(b))
        .ok_or_else(|| Error::Validation("singular logistic information matrix".into()))
}
