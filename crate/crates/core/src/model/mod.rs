//! The longitudinal causal forest model:
//!
//! ```text
//! y[i,t] = mu(x[i,1]) + sum_{w=2..t} ( delta_w(x[i,w], y[i,1..w-1], pi[i,w])
//!                                      + tau_w(x[i,w], y[i,1..w-1]) * Z[i,w] ) + eps
//! eps ~ N(0, sigma2)
//! ```
//!
//! Each of `mu`, `delta_w` and `tau_w` is a sum of regression trees. The
//! outcome is standardized with its pooled mean and SD before sampling and
//! every reported quantity is mapped back to the original scale.

mod chain;
mod draws;
mod predict;
pub mod schema;

pub use chain::{draw_treatment, treatment_probability, update_sigma2, ChainState, FitObserver, NoObserver};
pub use draws::{
    pool_chains, ChainMeta, Draw, DrawsMeta, MissingCell, PosteriorDraws, Subjects,
    WavePropensity, FORMAT, FORMAT_VERSION,
};
pub use predict::{predict, Prediction, PredictionDraw};
pub use schema::{ColumnSource, ColumnSpec, ForestSchema, ModelSchema};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{plausible_value_views, PanelDataset, Standardizer};
use crate::error::{Error, Result};
use crate::propensity::{
    check_overlap, estimate_propensity, supplied, PropensityMethod, PropensityModel, ProbitConfig,
};
use crate::tree::{ForestKind, KernelConfig};
use chain::{run_chain, ChainInput, STREAM_PROPENSITY};
pub(crate) use chain::{forest_stream, stream, STREAM_SIGMA2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub n_mu: usize,
    pub n_delta: usize,
    pub n_tau: usize,
    pub alpha_mu: f64,
    pub beta_mu: f64,
    pub alpha_delta: f64,
    pub beta_delta: f64,
    pub alpha_tau: f64,
    pub beta_tau: f64,
    /// Leaf prior variances.
    pub sigma2_mu: f64,
    pub sigma2_delta: f64,
    pub sigma2_tau: f64,
    /// `sigma2 ~ InvGamma(nu / 2, nu * lambda / 2)`.
    pub nu: f64,
    pub lambda: f64,
    pub n_burn: usize,
    pub n_save: usize,
    pub seed: u64,
    pub kernel: KernelConfig,
}

impl Default for HyperParams {
    /// Simulation settings: 100/70/30 trees, 500 burn-in and 500 saved
    /// iterations.
    fn default() -> Self {
        HyperParams {
            n_mu: 100,
            n_delta: 70,
            n_tau: 30,
            alpha_mu: 0.95,
            beta_mu: 2.0,
            alpha_delta: 0.95,
            beta_delta: 2.0,
            alpha_tau: 0.25,
            beta_tau: 3.0,
            sigma2_mu: 1.0 / 100.0,
            sigma2_delta: 1.0 / 70.0,
            sigma2_tau: 0.25 / 30.0,
            nu: 3.0,
            lambda: 0.1,
            n_burn: 500,
            n_save: 500,
            seed: 0,
            kernel: KernelConfig::default(),
        }
    }
}

impl HyperParams {
    /// Longer chains for applied analyses: 3000 burn-in, 2000 saved.
    pub fn applied() -> Self {
        HyperParams {
            n_burn: 3000,
            n_save: 2000,
            ..Self::default()
        }
    }

    /// Sets tree counts and the leaf variances that default from them:
    /// `1 / n_mu`, `1 / n_delta` and `0.25 / n_tau`.
    pub fn with_trees(mut self, n_mu: usize, n_delta: usize, n_tau: usize) -> Self {
        self.n_mu = n_mu;
        self.n_delta = n_delta;
        self.n_tau = n_tau;
        self.sigma2_mu = 1.0 / n_mu as f64;
        self.sigma2_delta = 1.0 / n_delta as f64;
        self.sigma2_tau = 0.25 / n_tau as f64;
        self
    }

    pub fn with_iterations(mut self, n_burn: usize, n_save: usize) -> Self {
        self.n_burn = n_burn;
        self.n_save = n_save;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.n_mu == 0 || self.n_delta == 0 || self.n_tau == 0 {
            return bad("tree counts must be positive".into());
        }
        if self.n_save == 0 {
            return bad("n_save must be positive".into());
        }
        for (name, a, b) in [
            ("mu", self.alpha_mu, self.beta_mu),
            ("delta", self.alpha_delta, self.beta_delta),
            ("tau", self.alpha_tau, self.beta_tau),
        ] {
            if !(a > 0.0 && a < 1.0) || !(b >= 0.0) {
                return bad(format!(
                    "{name} tree prior needs 0 < alpha < 1 and beta >= 0, got ({a}, {b})"
                ));
            }
        }
        for (name, v) in [
            ("sigma2_mu", self.sigma2_mu),
            ("sigma2_delta", self.sigma2_delta),
            ("sigma2_tau", self.sigma2_tau),
            ("nu", self.nu),
            ("lambda", self.lambda),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.kernel.min_leaf_size == 0 {
            return bad("min_leaf_size must be positive".into());
        }
        Ok(())
    }
}

/// Source of the per-wave propensity scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityInput {
    /// Estimate from the data with the given method.
    Estimate(PropensityMethod),
    /// Use the dataset's `pi.<w>` columns.
    Dataset,
    /// Scores given directly, `scores[w - 2][i]`.
    Scores(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub propensity: PropensityInput,
    pub probit: ProbitConfig,
    /// Refuse to fit when a wave lacks treated or untreated subjects.
    pub require_overlap: bool,
    /// Pin every tau tree to a zero stump.
    pub freeze_tau: bool,
    /// Chains to run when the data has no plausible values.
    pub n_chains: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            propensity: PropensityInput::Estimate(PropensityMethod::ProbitForest),
            probit: ProbitConfig::default(),
            require_overlap: true,
            freeze_tau: false,
            n_chains: 1,
        }
    }
}

/// Seed of chain `c`.
pub fn chain_seed(seed: u64, chain: usize) -> u64 {
    seed.wrapping_add(chain as u64)
}

/// Fits one chain to `data` with the chain seed `hp.seed`.
pub fn fit(data: &PanelDataset, hp: &HyperParams, opts: &FitOptions) -> Result<PosteriorDraws> {
    fit_chain(data, hp, opts, 0, hp.seed, &mut NoObserver)
}

/// Fits one chain, reporting progress to `observer`.
pub fn fit_with_observer<O: FitObserver>(
    data: &PanelDataset,
    hp: &HyperParams,
    opts: &FitOptions,
    observer: &mut O,
) -> Result<PosteriorDraws> {
    fit_chain(data, hp, opts, 0, hp.seed, observer)
}

/// Runs one chain per plausible value (or `opts.n_chains` chains on the
/// observed outcome when there are none) in parallel and pools them.
/// Chain `c` uses seed `hp.seed + c`.
pub fn fit_chains(data: &PanelDataset, hp: &HyperParams, opts: &FitOptions) -> Result<PosteriorDraws> {
    let views = if data.plausible_values().is_empty() {
        if opts.n_chains == 0 {
            return Err(Error::Validation("n_chains must be positive".into()));
        }
        vec![data.clone(); opts.n_chains]
    } else {
        plausible_value_views(data)?
    };
    let parts: Vec<Result<PosteriorDraws>> = views
        .par_iter()
        .enumerate()
        .map(|(c, view)| fit_chain(view, hp, opts, c, chain_seed(hp.seed, c), &mut NoObserver))
        .collect();
    pool_chains(parts.into_iter().collect::<Result<Vec<_>>>()?)
}

fn fit_chain<O: FitObserver>(
    data: &PanelDataset,
    hp: &HyperParams,
    opts: &FitOptions,
    chain: usize,
    seed: u64,
    observer: &mut O,
) -> Result<PosteriorDraws> {
    hp.validate()?;
    let schema = ModelSchema::for_data(data)?;
    let t = data.n_waves();
    if opts.require_overlap {
        for w in 2..=t {
            check_overlap(w, data.treatment(w))?;
        }
    }
    let standardizer = Standardizer::fit(data.outcomes().iter().flatten())?;
    let y_std: Vec<Vec<f64>> = data
        .outcomes()
        .iter()
        .map(|yt| yt.iter().map(|v| standardizer.standardize(*v)).collect())
        .collect();

    let mut propensity = Vec::with_capacity(t - 1);
    let mut models = Vec::with_capacity(t - 1);
    for w in 2..=t {
        let (scores, model) = match &opts.propensity {
            PropensityInput::Estimate(PropensityMethod::Supplied) | PropensityInput::Dataset => {
                let s = data.supplied_propensity(w).ok_or_else(|| {
                    Error::Schema(format!("dataset has no `pi.{w}` propensity column"))
                })?;
                (supplied(w, s)?.scores, PropensityModel::Supplied)
            }
            PropensityInput::Scores(all) => {
                let s = all.get(w - 2).ok_or_else(|| {
                    Error::Validation(format!("no supplied propensity scores for wave {w}"))
                })?;
                if s.len() != data.n_subjects() {
                    return Err(Error::Validation(format!(
                        "{} propensity scores for {} subjects",
                        s.len(),
                        data.n_subjects()
                    )));
                }
                (supplied(w, s)?.scores, PropensityModel::Supplied)
            }
            PropensityInput::Estimate(method) => {
                let design = schema.design(ForestKind::Propensity(w), data, None)?;
                let mut rng = stream(seed, STREAM_PROPENSITY + w as u64);
                let (est, model) = estimate_propensity(
                    w,
                    &design,
                    data.treatment(w),
                    *method,
                    &opts.probit,
                    &mut rng,
                )?;
                (est.scores, model)
            }
        };
        propensity.push(scores);
        models.push(WavePropensity { wave: w, model });
    }

    let mut designs = vec![(ForestKind::Mu, schema.design(ForestKind::Mu, data, None)?)];
    for w in 2..=t {
        designs.push((
            ForestKind::Delta(w),
            schema.design(ForestKind::Delta(w), data, Some(&propensity[w - 2]))?,
        ));
        designs.push((ForestKind::Tau(w), schema.design(ForestKind::Tau(w), data, None)?));
    }

    let mut chain_meta = ChainMeta {
        chain,
        seed,
        replicate: data.replicate(),
        standardizer,
        propensity: models,
        acceptance: Vec::new(),
    };
    let input = ChainInput {
        y_std,
        treatments: data.treatments().to_vec(),
        propensity,
        designs,
    };
    let (draws, acceptance) = run_chain(input, hp, opts, &chain_meta, standardizer, observer)?;
    chain_meta.acceptance = acceptance;

    let subjects = Subjects {
        ids: data.ids().to_vec(),
        weights: data.weights().to_vec(),
        last_wave: (0..data.n_subjects())
            .map(|i| data.last_observed_wave(i))
            .collect(),
        treatments: data.treatments().to_vec(),
    };
    let missing_z = data
        .treatments()
        .iter()
        .enumerate()
        .flat_map(|(k, zw)| {
            zw.iter()
                .enumerate()
                .filter(|(_, v)| v.is_none())
                .map(move |(i, _)| MissingCell {
                    wave: k + 2,
                    subject: i,
                })
        })
        .collect();
    Ok(PosteriorDraws {
        meta: DrawsMeta {
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::Value::Null,
            hyper: hp.clone(),
            schema_hash: schema.hash(),
            schema,
            freeze_tau: opts.freeze_tau,
            chains: vec![chain_meta],
            subjects,
            missing_z,
        },
        draws,
    })
}
