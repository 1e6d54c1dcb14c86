use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Tree;
use crate::error::{Error, Result};

/// Zero-mean normal prior on leaf values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeafPrior {
    pub variance: f64,
}

impl LeafPrior {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::Validation(format!(
                "leaf prior variance must be positive, got {variance}"
            )));
        }
        Ok(LeafPrior { variance })
    }
}

/// Sufficient statistics of the partial residuals that land in one leaf.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LeafStats {
    pub count: u32,
    pub sum: f64,
}

impl LeafStats {
    pub fn from_residuals(r: &[f64]) -> Self {
        LeafStats {
            count: r.len() as u32,
            sum: r.iter().sum(),
        }
    }

    #[inline]
    pub fn add(&mut self, count: u32, sum: f64) {
        self.count += count;
        self.sum += sum;
    }

    /// The part of the leaf's log marginal likelihood that depends on the
    /// tree. The omitted terms, `-(n/2) log(2 pi sigma2) - sum(r^2) / (2 sigma2)`,
    /// are identical for any two trees over the same residuals.
    #[inline]
    pub fn log_kernel(&self, sigma2: f64, prior: LeafPrior) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let n = self.count as f64;
        let denom = sigma2 + n * prior.variance;
        0.5 * (sigma2 / denom).ln() + prior.variance * self.sum * self.sum / (2.0 * sigma2 * denom)
    }

    /// Mean and variance of the conjugate normal posterior of the leaf value.
    #[inline]
    pub fn posterior(&self, sigma2: f64, prior: LeafPrior) -> (f64, f64) {
        let var = 1.0 / (1.0 / prior.variance + self.count as f64 / sigma2);
        (var * self.sum / sigma2, var)
    }
}

/// Log marginal likelihood of residuals grouped by leaf, with each leaf's
/// mean integrated out under the normal leaf prior. Empty leaves contribute 0.
pub fn log_marginal_likelihood(leaves: &[&[f64]], sigma2: f64, prior: LeafPrior) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::Validation(format!("sigma2 must be positive, got {sigma2}")));
    }
    let mut total = 0.0;
    for r in leaves {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite residual".to_string()));
        }
        if r.is_empty() {
            continue;
        }
        let n = r.len() as f64;
        let ss: f64 = r.iter().map(|v| v * v).sum();
        total += -0.5 * n * (2.0 * std::f64::consts::PI * sigma2).ln() - ss / (2.0 * sigma2)
            + LeafStats::from_residuals(r).log_kernel(sigma2, prior);
    }
    Ok(total)
}

/// Draws every leaf value of `tree` from its conjugate posterior. `stats` is
/// indexed by node id; leaves with no data draw from the prior.
pub fn sample_leaf_values<R: Rng + ?Sized>(
    tree: &mut Tree,
    stats: &[LeafStats],
    sigma2: f64,
    prior: LeafPrior,
    rng: &mut R,
) {
    let leaves: Vec<usize> = tree.leaves().collect();
    for id in leaves {
        let s = stats.get(id).copied().unwrap_or_default();
        let (mean, var) = s.posterior(sigma2, prior);
        let z: f64 = StandardNormal.sample(rng);
        tree.set_leaf_value(id, mean + var.sqrt() * z);
    }
}
