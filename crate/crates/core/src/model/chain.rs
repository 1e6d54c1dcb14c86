//! One MCMC chain: backfitting over the mu, delta and tau forests, then the
//! error variance, then missing treatment indicators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::draws::{ChainMeta, Draw};
use super::{FitOptions, HyperParams};
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::tree::{
    Design, Forest, ForestKind, LeafPrior, Tree, TreeData, TreePrior, TreeSampler,
};

/// RNG stream ids within a chain. Each forest owns its stream so that
/// switching one forest off leaves the draws of the others unchanged.
pub(crate) const STREAM_SIGMA2: u64 = 0;
pub(crate) const STREAM_IMPUTE: u64 = 1;
pub(crate) const STREAM_PROPENSITY: u64 = 1000;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub(crate) fn forest_stream(kind: ForestKind) -> u64 {
    match kind {
        ForestKind::Mu => 2,
        ForestKind::Delta(w) => 3 + 2 * (w as u64 - 2),
        ForestKind::Tau(w) => 4 + 2 * (w as u64 - 2),
        ForestKind::Difference(w) => 500 + w as u64,
        ForestKind::Propensity(w) => STREAM_PROPENSITY + w as u64,
    }
}

/// Draws `sigma2 ~ InvGamma((nu + n) / 2, (nu * lambda + ssr) / 2)`.
pub fn update_sigma2<R: Rng + ?Sized>(n: usize, ssr: f64, nu: f64, lambda: f64, rng: &mut R) -> f64 {
    let shape = 0.5 * (nu + n as f64);
    let rate = 0.5 * (nu * lambda + ssr);
    let g = Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters");
    1.0 / g.sample(rng)
}

/// Full-conditional probability that a missing treatment indicator is 1.
///
/// `residuals` holds, for each observed wave from the treatment wave on, the
/// standardized outcome minus every fitted contribution except this
/// treatment's effect; `tau` is that effect.
pub fn treatment_probability(p: f64, sigma2: f64, residuals: &[f64], tau: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Validation(format!(
            "prior treatment probability must be in (0, 1), got {p}"
        )));
    }
    let delta_ss: f64 = residuals
        .iter()
        .map(|e| (e - tau) * (e - tau) - e * e)
        .sum();
    let log_odds = (p / (1.0 - p)).ln() - delta_ss / (2.0 * sigma2);
    Ok(1.0 / (1.0 + (-log_odds).exp()))
}

/// Draws a missing treatment indicator from its full conditional; the
/// arguments are those of [`treatment_probability`].
pub fn draw_treatment<R: Rng + ?Sized>(
    p: f64,
    sigma2: f64,
    residuals: &[f64],
    tau: f64,
    rng: &mut R,
) -> Result<bool> {
    let prob = treatment_probability(p, sigma2, residuals, tau)?;
    Ok(rng.random::<f64>() < prob)
}

/// Hooks called during sampling, for diagnostics and tests.
pub trait FitObserver {
    fn after_tree(&mut self, _state: &ChainState) {}
    fn after_iteration(&mut self, _iteration: usize, _state: &ChainState) {}
}

/// Observer that does nothing.
pub struct NoObserver;

impl FitObserver for NoObserver {}

pub(crate) struct ForestState {
    pub kind: ForestKind,
    pub design: Design,
    pub trees: Vec<Tree>,
    pub assignments: Vec<Vec<u32>>,
    pub sampler: TreeSampler,
    pub rng: ChaCha8Rng,
    /// First wave whose outcome the forest contributes to.
    pub first_wave: usize,
    /// For tau forests, the treatment wave whose indicator multiplies it.
    pub treatment_wave: Option<usize>,
    /// Running sum of the trees for every subject.
    pub fit: Vec<f64>,
    pub frozen: bool,
    pub accepted: u64,
    pub proposed: u64,
}

/// Mutable state of one chain, on the standardized scale.
pub struct ChainState {
    n: usize,
    t: usize,
    /// Standardized outcomes, row-major `[i * t + (wave - 1)]`.
    y: Vec<f64>,
    /// Last observed wave per subject.
    last: Vec<usize>,
    /// Current residuals, same layout as `y`; unobserved cells unused.
    resid: Vec<f64>,
    /// Current treatment values `[w - 2][i]`, imputed where missing.
    z: Vec<Vec<f64>>,
    missing: Vec<(usize, usize)>,
    propensity: Vec<Vec<f64>>,
    pub(crate) forests: Vec<ForestState>,
    sigma2: f64,
}

impl ChainState {
    pub fn n_subjects(&self) -> usize {
        self.n
    }

    pub fn n_waves(&self) -> usize {
        self.t
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Current residual of an observed cell.
    pub fn residual(&self, i: usize, wave: usize) -> Option<f64> {
        (wave <= self.last[i]).then(|| self.resid[i * self.t + wave - 1])
    }

    /// Current value (0 or 1) of a treatment indicator, imputed if missing.
    pub fn treatment(&self, i: usize, wave: usize) -> f64 {
        self.z[wave - 2][i]
    }

    /// Running fit of a forest for each subject.
    pub fn forest_fit(&self, kind: ForestKind) -> Option<&[f64]> {
        self.forests
            .iter()
            .find(|f| f.kind == kind)
            .map(|f| f.fit.as_slice())
    }

    pub fn trees(&self, kind: ForestKind) -> Option<&[Tree]> {
        self.forests
            .iter()
            .find(|f| f.kind == kind)
            .map(|f| f.trees.as_slice())
    }

    /// Fitted value `mu + sum_{w <= wave} (delta_w + tau_w z_w)` computed
    /// from scratch by routing every row through every tree.
    pub fn recomputed_fit(&self, i: usize, wave: usize) -> f64 {
        let mut total = 0.0;
        for f in &self.forests {
            if f.first_wave > wave {
                continue;
            }
            let g: f64 = f
                .trees
                .iter()
                .map(|tr| tr.predict_row(&f.design, i))
                .sum();
            total += match f.treatment_wave {
                Some(w) => self.z[w - 2][i] * g,
                None => g,
            };
        }
        total
    }

    /// Largest gap between a maintained residual and one recomputed from the
    /// trees, over all observed cells.
    pub fn bookkeeping_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for wave in 1..=self.last[i] {
                let fresh = self.y[i * self.t + wave - 1] - self.recomputed_fit(i, wave);
                worst = worst.max((fresh - self.resid[i * self.t + wave - 1]).abs());
            }
        }
        worst
    }

    /// Largest gap between the cached forest fits and the trees.
    pub fn fit_cache_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for f in &self.forests {
            for i in 0..self.n {
                let g: f64 = f
                    .trees
                    .iter()
                    .map(|tr| tr.predict_row(&f.design, i))
                    .sum();
                worst = worst.max((g - f.fit[i]).abs());
            }
        }
        worst
    }

    fn sum_squared_residuals(&self) -> (usize, f64) {
        let mut n = 0;
        let mut ssr = 0.0;
        for i in 0..self.n {
            let row = &self.resid[i * self.t..i * self.t + self.last[i]];
            n += row.len();
            ssr += row.iter().map(|r| r * r).sum::<f64>();
        }
        (n, ssr)
    }
}

/// Everything the chain needs that was prepared from the data.
pub(crate) struct ChainInput {
    pub y_std: Vec<Vec<f64>>,
    pub treatments: Vec<Vec<Option<bool>>>,
    pub propensity: Vec<Vec<f64>>,
    /// `(kind, design)` for mu then delta/tau for each wave.
    pub designs: Vec<(ForestKind, Design)>,
}

pub(crate) fn run_chain<O: FitObserver>(
    input: ChainInput,
    hp: &HyperParams,
    opts: &FitOptions,
    meta: &ChainMeta,
    standardizer: Standardizer,
    observer: &mut O,
) -> Result<(Vec<Draw>, Vec<(String, f64)>)> {
    let mut state = init_state(input, hp, opts, meta.seed)?;
    let mut rng_sigma = stream(meta.seed, STREAM_SIGMA2);
    let mut rng_impute = stream(meta.seed, STREAM_IMPUTE);

    for (w, i) in state.missing.clone() {
        let p = state.propensity[w - 2][i];
        let z = (rng_impute.random::<f64>() < p) as u8 as f64;
        set_treatment(&mut state, w, i, z);
    }

    let total = hp.n_burn + hp.n_save;
    let mut draws = Vec::with_capacity(hp.n_save);
    let mut counts = vec![0u32; state.n];
    let mut sums = vec![0.0; state.n];
    let mut old = vec![0.0; state.n];
    let progress_every = (total / 10).max(1);

    for iter in 0..total {
        for f in 0..state.forests.len() {
            if state.forests[f].frozen {
                continue;
            }
            for j in 0..state.forests[f].trees.len() {
                update_tree(&mut state, f, j, &mut counts, &mut sums, &mut old);
                observer.after_tree(&state);
            }
        }

        let (n_obs, ssr) = state.sum_squared_residuals();
        state.sigma2 = update_sigma2(n_obs, ssr, hp.nu, hp.lambda, &mut rng_sigma);

        for k in 0..state.missing.len() {
            let (w, i) = state.missing[k];
            impute_one(&mut state, w, i, &mut rng_impute)?;
        }

        observer.after_iteration(iter, &state);
        if iter >= hp.n_burn {
            draws.push(snapshot(&state, meta.chain, iter - hp.n_burn, &standardizer)?);
        }
        if (iter + 1) % progress_every == 0 {
            log::info!("chain {}: iteration {}/{}", meta.chain, iter + 1, total);
        }
    }
    let acceptance = state
        .forests
        .iter()
        .filter(|f| f.proposed > 0)
        .map(|f| (f.kind.to_string(), f.accepted as f64 / f.proposed as f64))
        .collect();
    Ok((draws, acceptance))
}

fn init_state(input: ChainInput, hp: &HyperParams, opts: &FitOptions, seed: u64) -> Result<ChainState> {
    let t = input.y_std.len();
    let n = input.y_std[0].len();
    let mut y = vec![f64::NAN; n * t];
    let mut last = vec![0; n];
    for i in 0..n {
        for wave in 1..=t {
            let v = input.y_std[wave - 1][i];
            y[i * t + wave - 1] = v;
            if !v.is_nan() {
                last[i] = wave;
            }
        }
    }
    let z: Vec<Vec<f64>> = input
        .treatments
        .iter()
        .map(|zw| zw.iter().map(|v| v.map_or(0.0, |b| b as u8 as f64)).collect())
        .collect();
    let missing: Vec<(usize, usize)> = input
        .treatments
        .iter()
        .enumerate()
        .flat_map(|(k, zw)| {
            zw.iter()
                .enumerate()
                .filter(|(_, v)| v.is_none())
                .map(move |(i, _)| (k + 2, i))
        })
        .collect();

    let mut forests = Vec::with_capacity(input.designs.len());
    for (kind, design) in input.designs {
        let (n_trees, alpha, beta, leaf_var, first_wave, treatment_wave) = match kind {
            ForestKind::Mu => (hp.n_mu, hp.alpha_mu, hp.beta_mu, hp.sigma2_mu, 1, None),
            ForestKind::Delta(w) => (hp.n_delta, hp.alpha_delta, hp.beta_delta, hp.sigma2_delta, w, None),
            ForestKind::Tau(w) => (hp.n_tau, hp.alpha_tau, hp.beta_tau, hp.sigma2_tau, w, Some(w)),
            other => {
                return Err(Error::Validation(format!("{other} forest is not part of the model")))
            }
        };
        forests.push(ForestState {
            kind,
            trees: vec![Tree::stump(kind); n_trees],
            assignments: vec![vec![0; n]; n_trees],
            sampler: TreeSampler::new(
                hp.kernel,
                TreePrior::new(alpha, beta)?,
                LeafPrior::new(leaf_var)?,
            ),
            rng: stream(seed, forest_stream(kind)),
            first_wave,
            treatment_wave,
            fit: vec![0.0; n],
            frozen: opts.freeze_tau && treatment_wave.is_some(),
            accepted: 0,
            proposed: 0,
            design,
        });
    }

    Ok(ChainState {
        n,
        t,
        resid: y.clone(),
        y,
        last,
        z,
        missing,
        propensity: input.propensity,
        forests,
        sigma2: 1.0,
    })
}

fn update_tree(
    state: &mut ChainState,
    f: usize,
    j: usize,
    counts: &mut [u32],
    sums: &mut [f64],
    old: &mut [f64],
) {
    let t = state.t;
    let forest = &mut state.forests[f];
    let a = forest.first_wave - 1;
    let z: Option<&[f64]> = forest.treatment_wave.map(|w| state.z[w - 2].as_slice());

    let tree = &forest.trees[j];
    let rows = state.resid.chunks_exact(t).zip(&state.last);
    for (i, ((row, &last), &leaf)) in rows.zip(&forest.assignments[j]).enumerate() {
        let g = tree.leaf_value(leaf as usize);
        old[i] = g;
        let active = z.is_none_or(|z| z[i] != 0.0);
        if active && last > a {
            let cells = &row[a..last];
            counts[i] = cells.len() as u32;
            sums[i] = cells.iter().sum::<f64>() + cells.len() as f64 * g;
        } else {
            counts[i] = 0;
            sums[i] = 0.0;
        }
    }

    let data = TreeData::new(&forest.design, counts, sums);
    let step = forest.sampler.step(
        &mut forest.trees[j],
        &mut forest.assignments[j],
        &data,
        state.sigma2,
        &mut forest.rng,
    );
    forest.proposed += 1;
    forest.accepted += step.accepted as u64;

    let tree = &forest.trees[j];
    let rows = state.resid.chunks_exact_mut(t).zip(&state.last);
    let cached = forest.fit.iter_mut().zip(&forest.assignments[j]);
    for (i, ((row, &last), (fit, &leaf))) in rows.zip(cached).enumerate() {
        let delta = tree.leaf_value(leaf as usize) - old[i];
        *fit += delta;
        let mult = z.map_or(1.0, |z| z[i]);
        if mult != 0.0 && last > a {
            for r in &mut row[a..last] {
                *r -= mult * delta;
            }
        }
    }
}

fn tau_fit(state: &ChainState, w: usize, i: usize) -> f64 {
    state
        .forests
        .iter()
        .find(|f| f.kind == ForestKind::Tau(w))
        .map_or(0.0, |f| f.fit[i])
}

fn set_treatment(state: &mut ChainState, w: usize, i: usize, z: f64) {
    let old = state.z[w - 2][i];
    if old == z {
        return;
    }
    let tau = tau_fit(state, w, i);
    let t = state.t;
    let last = state.last[i];
    if last >= w {
        for r in &mut state.resid[i * t + w - 1..i * t + last] {
            *r += (old - z) * tau;
        }
    }
    state.z[w - 2][i] = z;
}

fn impute_one<R: Rng + ?Sized>(state: &mut ChainState, w: usize, i: usize, rng: &mut R) -> Result<()> {
    let tau = tau_fit(state, w, i);
    let z = state.z[w - 2][i];
    let t = state.t;
    let last = state.last[i];
    let without: Vec<f64> = if last >= w {
        state.resid[i * t + w - 1..i * t + last]
            .iter()
            .map(|r| r + z * tau)
            .collect()
    } else {
        Vec::new()
    };
    let draw = draw_treatment(state.propensity[w - 2][i], state.sigma2, &without, tau, rng)?;
    set_treatment(state, w, i, draw as u8 as f64);
    Ok(())
}

fn snapshot(state: &ChainState, chain: usize, iteration: usize, st: &Standardizer) -> Result<Draw> {
    let mut forests = Vec::with_capacity(state.forests.len());
    let mut mu = Vec::new();
    let mut delta = vec![Vec::new(); state.t - 1];
    let mut tau = vec![Vec::new(); state.t - 1];
    for f in &state.forests {
        let g: Vec<f64> = (0..state.n)
            .map(|i| {
                f.trees
                    .iter()
                    .zip(&f.assignments)
                    .fold(0.0, |acc, (tr, a)| acc + tr.leaf_value(a[i] as usize))
            })
            .collect();
        match f.kind {
            ForestKind::Mu => mu = g.into_iter().map(|v| st.destandardize(v)).collect(),
            ForestKind::Delta(w) => delta[w - 2] = g.into_iter().map(|v| st.rescale(v)).collect(),
            ForestKind::Tau(w) => tau[w - 2] = g.into_iter().map(|v| st.rescale(v)).collect(),
            _ => {}
        }
        forests.push(Forest::new(f.kind, f.trees.clone())?);
    }
    let imputed_z = state
        .missing
        .iter()
        .map(|&(w, i)| state.z[w - 2][i] as u8)
        .collect();
    Ok(Draw {
        chain,
        iteration,
        sigma2: state.sigma2,
        imputed_z,
        forests,
        mu,
        delta,
        tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn treatment_probability_examples() {
        assert_relative_eq!(treatment_probability(0.3, 1.0, &[0.4], 0.0).unwrap(), 0.3, epsilon = 1e-15);
        assert_relative_eq!(
            treatment_probability(0.5, 1.0, &[1.0], 1.0).unwrap(),
            1.0 / (1.0 + (-0.5f64).exp()),
            epsilon = 1e-15
        );
        assert_relative_eq!(treatment_probability(0.5, 1.0, &[1.0], 1.0).unwrap(), 0.6225, epsilon = 1e-4);
        assert_relative_eq!(
            treatment_probability(0.2, 1.0, &[0.0], 1.0).unwrap(),
            1.0 / (1.0 + 4.0 * 0.5f64.exp()),
            epsilon = 1e-15
        );
        assert_relative_eq!(treatment_probability(0.2, 1.0, &[0.0], 1.0).unwrap(), 0.1317, epsilon = 1e-4);
        // no observed outcome after the treatment: prior
        assert_eq!(treatment_probability(0.2, 1.0, &[], 1.0).unwrap(), 0.2);
        assert!(treatment_probability(0.0, 1.0, &[0.0], 1.0).is_err());
        assert!(treatment_probability(1.0, 1.0, &[0.0], 1.0).is_err());
    }

    #[test]
    fn sigma2_posterior_mean() {
        // InvGamma(51.5, 40.15) has mean 40.15 / 50.5
        let mut rng = stream(1, 0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| update_sigma2(100, 80.0, 3.0, 0.1, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let want = 40.15 / 50.5;
        assert_relative_eq!(want, 0.795, epsilon = 1e-3);
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - want).abs() < 3.0 * (var / n as f64).sqrt());
        assert!(draws.iter().all(|d| *d > 0.0));
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a: u64 = stream(7, 2).random();
        let b: u64 = stream(7, 2).random();
        let c: u64 = stream(7, 3).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(forest_stream(ForestKind::Delta(3)), forest_stream(ForestKind::Tau(2)));
    }
}
