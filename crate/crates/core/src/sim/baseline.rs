//! Single-forest BART on the differenced outcome, the comparison estimator
//! of the benchmarks.
//!
//! For wave `w` the forest is fit to `y.w - y.(w-1)` on the covariates
//! available by wave `w` and the treatments `z.2..z.w`, with `z.w` as an
//! ordinary covariate. Earlier outcomes are not inputs. Growth is read off
//! as `f(x, 0)` and the effect as `f(x, 1) - f(x, 0)`.

use serde::{Deserialize, Serialize};

use crate::data::{PanelDataset, Standardizer};
use crate::error::{Error, Result};
use crate::model::{forest_stream, stream, update_sigma2, ModelSchema, STREAM_SIGMA2};
use crate::tree::{Design, Forest, ForestKind, KernelConfig, LeafPrior, Tree, TreeData, TreePrior, TreeSampler};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BartConfig {
    pub n_trees: usize,
    pub alpha: f64,
    pub beta: f64,
    pub nu: f64,
    pub lambda: f64,
    pub n_burn: usize,
    pub n_save: usize,
    pub kernel: KernelConfig,
}

impl Default for BartConfig {
    fn default() -> Self {
        BartConfig {
            n_trees: 200,
            alpha: 0.95,
            beta: 2.0,
            nu: 3.0,
            lambda: 0.1,
            n_burn: 500,
            n_save: 500,
            kernel: KernelConfig::default(),
        }
    }
}

/// Saved forests of a BART fit. Predictions are on the original scale.
#[derive(Debug, Clone, PartialEq)]
pub struct BartFit {
    pub standardizer: Standardizer,
    pub forests: Vec<Forest>,
    /// On the standardized scale.
    pub sigma2: Vec<f64>,
}

impl BartFit {
    /// `out[d][i]` for every saved draw `d`.
    pub fn predict(&self, design: &Design) -> Result<Vec<Vec<f64>>> {
        self.forests
            .iter()
            .map(|f| {
                f.check_design(design)?;
                Ok(f.predict(design)
                    .into_iter()
                    .map(|v| self.standardizer.destandardize(v))
                    .collect())
            })
            .collect()
    }
}

/// Fits a sum of `cfg.n_trees` trees to `y` by backfitting MCMC. The leaf
/// prior variance is `1 / n_trees` on the standardized scale.
pub fn fit_bart(design: &Design, y: &[f64], kind: ForestKind, cfg: &BartConfig, seed: u64) -> Result<BartFit> {
    let n = y.len();
    if n != design.n_rows() {
        return Err(Error::Validation(format!("{n} outcomes for {} design rows", design.n_rows())));
    }
    if cfg.n_trees == 0 || cfg.n_save == 0 {
        return Err(Error::Validation("BART needs at least one tree and one saved draw".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("BART outcome has missing or non-finite values".into()));
    }
    let st = Standardizer::fit(y)?;
    let mut resid: Vec<f64> = y.iter().map(|v| st.standardize(*v)).collect();
    let mut sampler = TreeSampler::new(
        cfg.kernel,
        TreePrior::new(cfg.alpha, cfg.beta)?,
        LeafPrior::new(1.0 / cfg.n_trees as f64)?,
    );
    let mut rng = stream(seed, forest_stream(kind));
    let mut rng_sigma = stream(seed, STREAM_SIGMA2);
    let mut trees = vec![Tree::stump(kind); cfg.n_trees];
    let mut assignments = vec![vec![0u32; n]; cfg.n_trees];
    let counts = vec![1u32; n];
    let mut sums = vec![0.0; n];
    let mut old = vec![0.0; n];
    let mut sigma2 = 1.0;
    let mut forests = Vec::with_capacity(cfg.n_save);
    let mut sigmas = Vec::with_capacity(cfg.n_save);

    for iter in 0..cfg.n_burn + cfg.n_save {
        for (tree, assignment) in trees.iter_mut().zip(&mut assignments) {
            for i in 0..n {
                old[i] = tree.leaf_value(assignment[i] as usize);
                sums[i] = resid[i] + old[i];
            }
            let data = TreeData::new(design, &counts, &sums);
            sampler.step(tree, assignment, &data, sigma2, &mut rng);
            for i in 0..n {
                resid[i] -= tree.leaf_value(assignment[i] as usize) - old[i];
            }
        }
        let ssr = resid.iter().map(|r| r * r).sum();
        sigma2 = update_sigma2(n, ssr, cfg.nu, cfg.lambda, &mut rng_sigma);
        if iter >= cfg.n_burn {
            forests.push(Forest::new(kind, trees.clone())?);
            sigmas.push(sigma2);
        }
    }
    Ok(BartFit {
        standardizer: st,
        forests,
        sigma2: sigmas,
    })
}

/// A BART fit to the wave-`w` difference, ready to score counterfactuals.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceFit {
    pub wave: usize,
    pub schema: ModelSchema,
    pub bart: BartFit,
}

/// Posterior draws of growth and effect for every row of new data.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceEffects {
    /// `delta[d][i] = f(x_i, 0)`.
    pub delta: Vec<Vec<f64>>,
    /// `tau[d][i] = f(x_i, 1) - f(x_i, 0)`.
    pub tau: Vec<Vec<f64>>,
}

/// Fits BART to `y.w - y.(w-1)` over subjects observed at both waves whose
/// treatment at `w` is known.
pub fn fit_difference(data: &PanelDataset, w: usize, cfg: &BartConfig, seed: u64) -> Result<DifferenceFit> {
    let schema = ModelSchema::for_difference(data, w)?;
    let kind = ForestKind::Difference(w);
    let full = schema.design(kind, data, None)?;
    let (prev, cur, z) = (data.outcome(w - 1), data.outcome(w), data.treatment(w));
    let rows: Vec<usize> = (0..data.n_subjects())
        .filter(|&i| prev[i].is_finite() && cur[i].is_finite() && z[i].is_some())
        .collect();
    if rows.is_empty() {
        return Err(Error::Validation(format!("no subject is observed at waves {} and {w}", w - 1)));
    }
    let design = Design::new(
        rows.len(),
        (0..full.n_features())
            .map(|f| {
                let col = full.column(f);
                (full.names()[f].clone(), rows.iter().map(|&i| col[i]).collect())
            })
            .collect(),
    );
    let y: Vec<f64> = rows.iter().map(|&i| cur[i] - prev[i]).collect();
    let bart = fit_bart(&design, &y, kind, cfg, seed)?;
    Ok(DifferenceFit { wave: w, schema, bart })
}

impl DifferenceFit {
    pub fn effects(&self, newdata: &PanelDataset) -> Result<DifferenceEffects> {
        let kind = ForestKind::Difference(self.wave);
        let design = self.schema.design(kind, newdata, None)?;
        let z_name = format!("z.{}", self.wave);
        let at = |z: f64| {
            Design::new(
                design.n_rows(),
                (0..design.n_features())
                    .map(|f| {
                        let name = design.names()[f].clone();
                        let col = if name == z_name {
                            vec![z; design.n_rows()]
                        } else {
                            design.column(f).to_vec()
                        };
                        (name, col)
                    })
                    .collect(),
            )
        };
        let f0 = self.bart.predict(&at(0.0))?;
        let f1 = self.bart.predict(&at(1.0))?;
        let tau = f1
            .iter()
            .zip(&f0)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        Ok(DifferenceEffects { delta: f0, tau })
    }
}
