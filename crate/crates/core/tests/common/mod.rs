//! Oracle checks shared by the acceptance suite and the focused test files.
//! Every closed form here is computed independently of the library.
#![allow(dead_code)]

use std::f64::consts::PI;

use lbcf::data::PanelDataset;
use lbcf::model::{
    draw_treatment, fit_with_observer, predict, update_sigma2, ChainState, FitObserver,
    FitOptions, HyperParams, PropensityInput,
};
use lbcf::propensity::PropensityMethod;
use lbcf::sim::{gen_dgp1, Dgp1Config};
use lbcf::tree::{
    assign, log_marginal_likelihood, propose_specific, sample_leaf_values, Design, Direction,
    ForestKind, KernelConfig, LeafPrior, LeafStats, MoveKind, MoveProbabilities, NodeRecord,
    ProposalOutcome, Tree, TreeData, TreePrior, TreeSampler,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Result of one check, with a one-line account of the numbers.
#[derive(Debug, Clone)]
pub struct Check {
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Check {
            passed,
            detail: detail.into(),
        }
    }

    /// All of `checks` must pass.
    pub fn all(checks: Vec<Check>) -> Check {
        let passed = checks.iter().all(|c| c.passed);
        let detail = checks
            .iter()
            .map(|c| format!("[{}] {}", if c.passed { "ok" } else { "FAIL" }, c.detail))
            .collect::<Vec<_>>()
            .join("; ");
        Check { passed, detail }
    }
}

pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

const N_DRAWS: usize = 100_000;

/// Leaf values drawn by the Gibbs step against the normal-normal posterior.
pub fn leaf_value_moments() -> Check {
    let (sigma2, tau) = (0.8, 0.3);
    let prior = LeafPrior::new(tau).unwrap();
    let mut tree = Tree::from_records(
        ForestKind::Mu,
        &[
            NodeRecord::Split {
                feature: 0,
                threshold: 0.5,
                missing_goes: Direction::Left,
            },
            NodeRecord::Leaf { value: 0.0 },
            NodeRecord::Leaf { value: 0.0 },
        ],
    )
    .unwrap();
    let stats = [
        LeafStats::default(),
        LeafStats { count: 7, sum: 3.2 },
        LeafStats { count: 3, sum: -1.1 },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut draws = [Vec::with_capacity(N_DRAWS), Vec::with_capacity(N_DRAWS)];
    for _ in 0..N_DRAWS {
        sample_leaf_values(&mut tree, &stats, sigma2, prior, &mut rng);
        draws[0].push(tree.leaf_value(1));
        draws[1].push(tree.leaf_value(2));
    }
    let mut checks = Vec::new();
    for (k, s) in stats[1..].iter().enumerate() {
        let precision = 1.0 / tau + s.count as f64 / sigma2;
        let want_var = 1.0 / precision;
        let want_mean = s.sum / sigma2 / precision;
        let (m, v) = mean_var(&draws[k]);
        let se_m = (want_var / N_DRAWS as f64).sqrt();
        let se_v = want_var * (2.0 / (N_DRAWS as f64 - 1.0)).sqrt();
        checks.push(Check::new(
            (m - want_mean).abs() <= 3.0 * se_m && (v - want_var).abs() <= 3.0 * se_v,
            format!(
                "leaf n={}: mean {m:.5} vs {want_mean:.5} ({:.2} SE), var {v:.5} vs {want_var:.5} ({:.2} SE)",
                s.count,
                (m - want_mean).abs() / se_m,
                (v - want_var).abs() / se_v
            ),
        ));
    }
    Check::all(checks)
}

/// Error-variance draws against the inverse-gamma posterior moments.
pub fn sigma2_moments() -> Check {
    let (n, ssr, nu, lambda) = (25usize, 18.3, 3.0, 0.1);
    let a = (nu + n as f64) / 2.0;
    let b = (nu * lambda + ssr) / 2.0;
    let want_mean = b / (a - 1.0);
    let want_var = b * b / ((a - 1.0) * (a - 1.0) * (a - 2.0));
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let draws: Vec<f64> = (0..N_DRAWS)
        .map(|_| update_sigma2(n, ssr, nu, lambda, &mut rng))
        .collect();
    let (m, v) = mean_var(&draws);
    let m4 = draws.iter().map(|d| (d - m).powi(4)).sum::<f64>() / N_DRAWS as f64;
    let se_m = (want_var / N_DRAWS as f64).sqrt();
    let se_v = ((m4 - v * v) / N_DRAWS as f64).sqrt();
    Check::new(
        (m - want_mean).abs() <= 3.0 * se_m && (v - want_var).abs() <= 3.0 * se_v,
        format!(
            "sigma2: mean {m:.5} vs {want_mean:.5} ({:.2} SE), var {v:.8} vs {want_var:.8} ({:.2} SE)",
            (m - want_mean).abs() / se_m,
            (v - want_var).abs() / se_v
        ),
    )
}

/// `log int prod_i N(r_i | m, sigma2) N(m | 0, tau) dm` by composite Simpson.
pub fn leaf_log_evidence_quadrature(r: &[f64], sigma2: f64, tau: f64) -> f64 {
    let n = r.len() as f64;
    let sum: f64 = r.iter().sum();
    let post_var = 1.0 / (1.0 / tau + n / sigma2);
    let centre = post_var * sum / sigma2;
    let half = 15.0 * post_var.sqrt();
    let log_f = |m: f64| -> f64 {
        let lik: f64 = r
            .iter()
            .map(|v| -0.5 * (2.0 * PI * sigma2).ln() - (v - m) * (v - m) / (2.0 * sigma2))
            .sum();
        lik - 0.5 * (2.0 * PI * tau).ln() - m * m / (2.0 * tau)
    };
    let peak = log_f(centre);
    let k = 4000;
    let h = 2.0 * half / k as f64;
    let mut acc = 0.0;
    for j in 0..=k {
        let m = centre - half + j as f64 * h;
        let w = if j == 0 || j == k {
            1.0
        } else if j % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * (log_f(m) - peak).exp();
    }
    peak + (acc * h / 3.0).ln()
}

/// Integrated likelihood against numerical integration on random small leaves.
pub fn marginal_likelihood_quadrature() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let noise = Normal::new(0.0, 1.5).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let sigma2 = rng.random_range(0.2..2.0);
        let tau = rng.random_range(0.05..1.0);
        let leaves: Vec<Vec<f64>> = (0..rng.random_range(1..=3))
            .map(|_| {
                (0..rng.random_range(1..=5))
                    .map(|_| noise.sample(&mut rng))
                    .collect()
            })
            .collect();
        let refs: Vec<&[f64]> = leaves.iter().map(|l| l.as_slice()).collect();
        let got = log_marginal_likelihood(&refs, sigma2, LeafPrior::new(tau).unwrap()).unwrap();
        let want: f64 = leaves
            .iter()
            .map(|l| leaf_log_evidence_quadrature(l, sigma2, tau))
            .sum();
        worst = worst.max((got - want).abs());
    }
    Check::new(
        worst <= 1e-6,
        format!("log marginal likelihood vs quadrature on 50 leaf sets: max error {worst:.2e}"),
    )
}

/// `P(Z = 1)` from Bayes' rule with the full normal densities.
pub fn treatment_posterior(p: f64, sigma2: f64, residuals: &[f64], tau: f64) -> f64 {
    let log_lik = |shift: f64| -> f64 {
        residuals
            .iter()
            .map(|r| -0.5 * (2.0 * PI * sigma2).ln() - (r - shift) * (r - shift) / (2.0 * sigma2))
            .sum()
    };
    let l1 = p.ln() + log_lik(tau);
    let l0 = (1.0 - p).ln() + log_lik(0.0);
    let top = l1.max(l0);
    (l1 - top).exp() / ((l1 - top).exp() + (l0 - top).exp())
}

/// Imputed treatment frequencies against the closed-form full conditional.
pub fn missing_treatment_frequencies() -> Check {
    let cases: [(f64, f64, &[f64], f64); 5] = [
        (0.3, 1.0, &[0.4], 0.0),
        (0.7, 0.5, &[0.2, -0.4, 0.9], 0.0),
        (0.5, 1.0, &[1.0], 1.0),
        (0.2, 0.6, &[0.5, 0.8], 0.7),
        (0.6, 2.0, &[-0.3, 0.1, 0.4, -1.0], -0.5),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let mut checks = Vec::new();
    for (p, sigma2, r, tau) in cases {
        let want = treatment_posterior(p, sigma2, r, tau);
        let hits = (0..N_DRAWS)
            .filter(|_| draw_treatment(p, sigma2, r, tau, &mut rng).unwrap())
            .count();
        let freq = hits as f64 / N_DRAWS as f64;
        let se = (want * (1.0 - want) / N_DRAWS as f64).sqrt();
        let corner = tau != 0.0 || (want - p).abs() < 1e-15;
        checks.push(Check::new(
            (freq - want).abs() <= 3.0 * se && corner,
            format!("p={p} tau={tau}: freq {freq:.4} vs {want:.4} ({:.2} SE)", (freq - want).abs() / se),
        ));
    }
    Check::all(checks)
}

/// Twelve rows on one feature with minimum leaf size 5: the reachable trees
/// are the stump and single splits at x <= 4, 5 or 6.
fn enumeration_problem() -> (Design, Vec<u32>, Vec<f64>) {
    let x: Vec<f64> = (0..12).map(f64::from).collect();
    let jitter = [0.3, -0.5, 0.1, 0.4, -0.2, 0.6, 0.2, -0.1, 0.5, 0.0, -0.4, 0.3];
    let r: Vec<f64> = x
        .iter()
        .zip(jitter)
        .map(|(v, j)| if *v >= 6.0 { 0.45 + j } else { j })
        .collect();
    (Design::from_columns(vec![x]), vec![1; 12], r)
}

/// Log marginal likelihood through the multivariate normal with covariance
/// `sigma2 I + tau J` per leaf.
fn mvn_log_evidence(r: &[f64], sigma2: f64, tau: f64) -> f64 {
    let n = r.len() as f64;
    let sum: f64 = r.iter().sum();
    let ss: f64 = r.iter().map(|v| v * v).sum();
    let c = sigma2 + n * tau;
    let log_det = (n - 1.0) * sigma2.ln() + c.ln();
    let quad = (ss - tau * sum * sum / c) / sigma2;
    -0.5 * n * (2.0 * PI).ln() - 0.5 * log_det - 0.5 * quad
}

/// Exact posterior probability that the tree splits.
pub fn enumerated_split_probability(alpha: f64, beta: f64, sigma2: f64, tau: f64) -> f64 {
    let (design, _, r) = enumeration_problem();
    let n_values = design.n_rows() as f64;
    let stump = (1.0 - alpha).ln() + mvn_log_evidence(&r, sigma2, tau);
    let child_leaf = (1.0 - alpha * 2f64.powf(-beta)).ln();
    let splits: Vec<f64> = [4usize, 5, 6]
        .iter()
        .map(|&t| {
            alpha.ln() + 2.0 * child_leaf - n_values.ln()
                + mvn_log_evidence(&r[..=t], sigma2, tau)
                + mvn_log_evidence(&r[t + 1..], sigma2, tau)
        })
        .collect();
    let top = splits.iter().copied().fold(stump, f64::max);
    let s: f64 = splits.iter().map(|l| (l - top).exp()).sum();
    s / (s + (stump - top).exp())
}

/// Long-run split frequency of the tree kernel against enumeration, with a
/// batch-means standard error.
pub fn split_posterior_enumeration() -> Check {
    let (alpha, beta, sigma2, tau) = (0.95, 2.0, 0.25, 0.1);
    let want = enumerated_split_probability(alpha, beta, sigma2, tau);
    let (design, counts, sums) = enumeration_problem();
    let data = TreeData::new(&design, &counts, &sums);
    let mut sampler = TreeSampler::new(
        KernelConfig::default(),
        TreePrior::new(alpha, beta).unwrap(),
        LeafPrior::new(tau).unwrap(),
    );
    let mut tree = Tree::stump(ForestKind::Mu);
    let mut assignment = Vec::new();
    assign(&tree, &design, &mut assignment);
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let (burn, batches, batch_len) = (1_000, 200, 1_000);
    for _ in 0..burn {
        sampler.step(&mut tree, &mut assignment, &data, sigma2, &mut rng);
    }
    let mut means = Vec::with_capacity(batches);
    let mut deepest = 0;
    for _ in 0..batches {
        let mut hits = 0;
        for _ in 0..batch_len {
            sampler.step(&mut tree, &mut assignment, &data, sigma2, &mut rng);
            hits += !tree.is_stump() as usize;
            deepest = deepest.max(tree.n_leaves());
        }
        means.push(hits as f64 / batch_len as f64);
    }
    let (freq, var) = mean_var(&means);
    let se = (var / batches as f64).sqrt();
    Check::new(
        (freq - want).abs() <= 3.0 * se && deepest <= 2,
        format!(
            "split probability: chain {freq:.6} vs enumeration {want:.6} ({:.2} MC SE, SE {se:.4})",
            (freq - want).abs() / se
        ),
    )
}

/// A small fit used by the structural checks.
pub fn small_problem(seed: u64) -> (PanelDataset, HyperParams, FitOptions) {
    let sim = gen_dgp1(
        &Dgp1Config {
            n_train: 60,
            n_test: 0,
            ..Dgp1Config::default()
        },
        seed,
    )
    .unwrap();
    let hp = HyperParams::default()
        .with_trees(6, 4, 3)
        .with_iterations(10, 10)
        .with_seed(seed);
    let opts = FitOptions {
        propensity: PropensityInput::Estimate(PropensityMethod::Logistic),
        ..FitOptions::default()
    };
    (sim.train, hp, opts)
}

#[derive(Default)]
struct Bookkeeper {
    trees: usize,
    iterations: usize,
    worst_residual: f64,
    worst_fit: f64,
}

impl FitObserver for Bookkeeper {
    fn after_tree(&mut self, state: &ChainState) {
        self.trees += 1;
        self.worst_residual = self.worst_residual.max(state.bookkeeping_error());
    }

    fn after_iteration(&mut self, _iteration: usize, state: &ChainState) {
        self.iterations += 1;
        self.worst_fit = self.worst_fit.max(state.fit_cache_error());
        self.worst_residual = self.worst_residual.max(state.bookkeeping_error());
    }
}

/// Residuals and cached fits agree with a from-scratch pass through the
/// trees after every tree update and every iteration.
pub fn residual_bookkeeping() -> Check {
    let (data, hp, opts) = small_problem(3);
    let mut obs = Bookkeeper::default();
    fit_with_observer(&data, &hp, &opts, &mut obs).unwrap();
    Check::new(
        obs.iterations == 20 && obs.trees > 0 && obs.worst_residual <= 1e-8 && obs.worst_fit <= 1e-8,
        format!(
            "bookkeeping over {} tree updates: residual gap {:.1e}, fit gap {:.1e}",
            obs.trees, obs.worst_residual, obs.worst_fit
        ),
    )
}

/// Stored per-draw components equal the stored forests evaluated on the
/// training rows, bit for bit.
pub fn fitted_value_identity() -> Check {
    let (data, hp, opts) = small_problem(5);
    let draws = lbcf::model::fit(&data, &hp, &opts).unwrap();
    let pred = predict(&draws, &data).unwrap();
    let same = draws.draws.len() == pred.draws.len()
        && draws.draws.iter().zip(&pred.draws).all(|(d, p)| {
            d.mu == p.mu && d.delta == p.delta && d.tau == p.tau
        });
    Check::new(
        same,
        format!("{} saved draws re-evaluated from their trees", draws.draws.len()),
    )
}

/// Random trees grown by repeated GROW proposals on `design`.
pub fn random_tree(design: &Design, n_grows: usize, rng: &mut ChaCha8Rng) -> Tree {
    let counts = vec![1u32; design.n_rows()];
    let sums = vec![0.0; design.n_rows()];
    let data = TreeData::new(design, &counts, &sums);
    let mut tree = Tree::stump(ForestKind::Mu);
    let mut a = Vec::new();
    for _ in 0..n_grows {
        assign(&tree, design, &mut a);
        if let ProposalOutcome::Candidate(p) =
            propose_specific(MoveKind::Grow, &tree, &data, &a, &MoveProbabilities::default(), rng)
        {
            tree = p.tree;
        }
    }
    let leaves: Vec<usize> = tree.leaves().collect();
    for (k, id) in leaves.into_iter().enumerate() {
        tree.set_leaf_value(id, k as f64);
    }
    tree
}

pub fn random_design(rows: usize, features: usize, missing: f64, rng: &mut ChaCha8Rng) -> Design {
    Design::from_columns(
        (0..features)
            .map(|_| {
                (0..rows)
                    .map(|_| {
                        if rng.random::<f64>() < missing {
                            f64::NAN
                        } else {
                            (rng.random_range(0..8) as f64) / 2.0
                        }
                    })
                    .collect()
            })
            .collect(),
    )
}

/// GROW followed by PRUNE of the new split restores the tree, and the two
/// transition ratios cancel.
pub fn grow_prune_reversibility(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let moves = MoveProbabilities::default();
    let mut tried = 0;
    let mut bad = 0;
    for _ in 0..cases {
        let design = random_design(40, 3, 0.1, &mut rng);
        let n_grows = rng.random_range(0..6);
        let tree = random_tree(&design, n_grows, &mut rng);
        let counts = vec![1u32; 40];
        let sums = vec![0.0; 40];
        let data = TreeData::new(&design, &counts, &sums);
        let mut a = Vec::new();
        assign(&tree, &design, &mut a);
        let ProposalOutcome::Candidate(grow) =
            propose_specific(MoveKind::Grow, &tree, &data, &a, &moves, &mut rng)
        else {
            continue;
        };
        tried += 1;
        let mut grown_a = Vec::new();
        assign(&grow.tree, &design, &mut grown_a);
        // PRUNE picks among prunable nodes at random; retry until it picks ours
        let prune = (0..1000).find_map(|_| {
            match propose_specific(MoveKind::Prune, &grow.tree, &data, &grown_a, &moves, &mut rng) {
                ProposalOutcome::Candidate(p) if p.node == grow.node => Some(p),
                _ => None,
            }
        });
        match prune {
            Some(p) if p.tree == tree && (grow.log_transition_ratio + p.log_transition_ratio).abs() <= 1e-12 => {}
            _ => bad += 1,
        }
    }
    Check::new(
        tried > cases / 2 && bad == 0,
        format!("grow/prune round trips: {tried} tried, {bad} mismatched"),
    )
}

/// Every row, missing values included, reaches exactly one leaf, and the
/// leaf reached by traversal is the one used for assignment.
pub fn traversal_exhaustive(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(67);
    let mut bad = 0;
    let mut rows = 0;
    for _ in 0..cases {
        let design = random_design(30, 3, 0.25, &mut rng);
        let tree = random_tree(&design, rng.random_range(0..8), &mut rng);
        let leaves: Vec<usize> = tree.leaves().collect();
        let mut hits = vec![0usize; tree.nodes().len()];
        for r in 0..design.n_rows() {
            rows += 1;
            match tree.traverse(&design.row(r)) {
                Ok(id) if leaves.contains(&id) && id == tree.leaf_of(&design, r) => hits[id] += 1,
                _ => bad += 1,
            }
        }
        if hits.iter().sum::<usize>() != design.n_rows() {
            bad += 1;
        }
    }
    Check::new(bad == 0, format!("traversal of {rows} rows: {bad} failures"))
}

/// Same seed, same bytes; a different seed, different draws.
pub fn seeded_reproducibility() -> Check {
    let (data, hp, opts) = small_problem(7);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = |hp: &HyperParams| {
        let draws = pool.install(|| lbcf::model::fit_chains(&data, hp, &FitOptions { n_chains: 2, ..opts.clone() }))
            .unwrap();
        let mut bytes = Vec::new();
        draws.write(&mut bytes).unwrap();
        bytes
    };
    let a = run(&hp);
    let b = run(&hp);
    let c = run(&hp.clone().with_seed(8));
    Check::new(
        a == b && a != c,
        format!("two-chain fits at 1 thread: {} bytes, identical reruns {}", a.len(), a == b),
    )
}
