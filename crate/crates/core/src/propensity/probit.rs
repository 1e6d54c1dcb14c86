use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::tree::{
    Design, Forest, ForestKind, KernelConfig, LeafPrior, Tree, TreeData, TreePrior,
    TreeSampler,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbitConfig {
    pub n_trees: usize,
    pub n_burn: usize,
    pub n_save: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Leaf prior SD is `3 / (k * sqrt(n_trees))`.
    pub k: f64,
}

impl Default for ProbitConfig {
    fn default() -> Self {
        ProbitConfig {
            n_trees: 50,
            n_burn: 250,
            n_save: 250,
            alpha: 0.95,
            beta: 2.0,
            k: 2.0,
        }
    }
}

/// Probit-link tree ensemble fit by latent-variable data augmentation.
/// Scores are posterior means of `Phi(offset + f(x))` over saved draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbitForestModel {
    pub offset: f64,
    pub n_features: usize,
    pub draws: Vec<Forest>,
}

impl ProbitForestModel {
    pub fn fit<R: Rng + ?Sized>(
        wave: usize,
        design: &Design,
        z: &[Option<bool>],
        cfg: &ProbitConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.n_trees == 0 || cfg.n_save == 0 {
            return Err(Error::Validation(
                "probit forest needs at least one tree and one saved draw".into(),
            ));
        }
        let n = design.n_rows();
        let kind = ForestKind::Propensity(wave);
        let observed = z.iter().filter(|v| v.is_some()).count() as f64;
        let treated = z.iter().filter(|v| **v == Some(true)).count() as f64;
        let offset = std_normal().inverse_cdf(treated / observed);

        let sd = 3.0 / (cfg.k * (cfg.n_trees as f64).sqrt());
        let mut sampler = TreeSampler::new(
            KernelConfig::default(),
            TreePrior::new(cfg.alpha, cfg.beta)?,
            LeafPrior::new(sd * sd)?,
        );
        let counts: Vec<u32> = z.iter().map(|v| v.is_some() as u32).collect();
        let mut trees = vec![Tree::stump(kind); cfg.n_trees];
        let mut assignments = vec![vec![0u32; n]; cfg.n_trees];
        let mut fit = vec![0.0; n];
        let mut latent = vec![0.0; n];
        let mut sums = vec![0.0; n];
        let mut old = vec![0.0; n];
        let mut draws = Vec::with_capacity(cfg.n_save);

        for iter in 0..cfg.n_burn + cfg.n_save {
            for i in 0..n {
                latent[i] = match z[i] {
                    Some(t) => truncated_normal(offset + fit[i], t, rng),
                    None => 0.0,
                };
            }
            for (tree, asg) in trees.iter_mut().zip(assignments.iter_mut()) {
                for i in 0..n {
                    old[i] = tree.leaf_value(asg[i] as usize);
                    sums[i] = if counts[i] > 0 {
                        latent[i] - offset - fit[i] + old[i]
                    } else {
                        0.0
                    };
                }
                sampler.step(tree, asg, &TreeData::new(design, &counts, &sums), 1.0, rng);
                for i in 0..n {
                    fit[i] += tree.leaf_value(asg[i] as usize) - old[i];
                }
            }
            if iter >= cfg.n_burn {
                draws.push(Forest::new(kind, trees.clone())?);
            }
        }
        Ok(ProbitForestModel {
            offset,
            n_features: design.n_features(),
            draws,
        })
    }

    /// Unclipped posterior-mean probabilities.
    pub fn score(&self, design: &Design) -> Result<Vec<f64>> {
        if design.n_features() != self.n_features {
            return Err(Error::Schema(format!(
                "probit propensity model expects {} columns, got {}",
                self.n_features,
                design.n_features()
            )));
        }
        for f in &self.draws {
            f.check_design(design)?;
        }
        let phi = std_normal();
        let m = self.draws.len() as f64;
        Ok((0..design.n_rows())
            .map(|r| {
                self.draws
                    .iter()
                    .map(|f| phi.cdf(self.offset + f.predict_row(design, r)))
                    .sum::<f64>()
                    / m
            })
            .collect())
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Draws from `N(mean, 1)` restricted to `(0, inf)` when `positive`, else
/// to `(-inf, 0)`.
pub fn truncated_normal<R: Rng + ?Sized>(mean: f64, positive: bool, rng: &mut R) -> f64 {
    if positive {
        mean + lower_tail(-mean, rng)
    } else {
        mean - lower_tail(mean, rng)
    }
}

/// Standard normal conditioned on `x > a`.
fn lower_tail<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    if a <= 0.5 {
        loop {
            let x: f64 = StandardNormal.sample(rng);
            if x > a {
                return x;
            }
        }
    }
    // exponential proposal with the optimal rate
    let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
    let exp = Exp::new(lambda).expect("positive rate");
    loop {
        let x = a + exp.sample(rng);
        let u: f64 = rng.random();
        if u.ln() <= -0.5 * (x - lambda) * (x - lambda) {
            return x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_normal_moments() {
        // E[X | X > a] = phi(a) / (1 - Phi(a)) for a standard normal
        let phi = std_normal();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for a in [-1.0, 0.0, 0.7, 3.0] {
            let n = 100_000;
            let draws: Vec<f64> = (0..n).map(|_| truncated_normal(-a, true, &mut rng) + a).collect();
            assert!(draws.iter().all(|x| *x > a));
            let mean = draws.iter().sum::<f64>() / n as f64;
            let density = (-0.5 * a * a).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let want = density / (1.0 - phi.cdf(a));
            let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(
                (mean - want).abs() < 4.0 * (var / n as f64).sqrt(),
                "a={a}: {mean} vs {want}"
            );
        }
        assert!(truncated_normal(2.0, false, &mut rng) < 0.0);
    }

    #[test]
    fn probit_forest_tracks_a_step_propensity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 400;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let z: Vec<Option<bool>> = x
            .iter()
            .map(|v| Some(rng.random::<f64>() < if *v < 0.5 { 0.2 } else { 0.8 }))
            .collect();
        let d = Design::new(n, vec![("x".into(), x)]);
        let cfg = ProbitConfig {
            n_burn: 100,
            n_save: 100,
            ..ProbitConfig::default()
        };
        let m = ProbitForestModel::fit(2, &d, &z, &cfg, &mut rng).unwrap();
        let s = m.score(&d).unwrap();
        let lo = s[..n / 2].iter().sum::<f64>() / (n / 2) as f64;
        let hi = s[n / 2..].iter().sum::<f64>() / (n / 2) as f64;
        assert!((lo - 0.2).abs() < 0.08 && (hi - 0.8).abs() < 0.08, "{lo} {hi}");
    }
}
