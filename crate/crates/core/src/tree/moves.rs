//! Grow / prune / change / swap proposals and the Metropolis-Hastings step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::leaf::{sample_leaf_values, LeafPrior, LeafStats};
use super::design::MISSING_RANK;
use super::{Design, Direction, SplitRule, Tree, TreePrior};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MoveKind {
    Grow,
    Prune,
    Change,
    Swap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoveProbabilities {
    pub grow: f64,
    pub prune: f64,
    pub change: f64,
    pub swap: f64,
}

impl Default for MoveProbabilities {
    fn default() -> Self {
        MoveProbabilities {
            grow: 0.25,
            prune: 0.25,
            change: 0.40,
            swap: 0.10,
        }
    }
}

impl MoveProbabilities {
    fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> MoveKind {
        let total = self.grow + self.prune + self.change + self.swap;
        let u = rng.random::<f64>() * total;
        if u < self.grow {
            MoveKind::Grow
        } else if u < self.grow + self.prune {
            MoveKind::Prune
        } else if u < self.grow + self.prune + self.change {
            MoveKind::Change
        } else {
            MoveKind::Swap
        }
    }

    fn of(&self, kind: MoveKind) -> f64 {
        let total = self.grow + self.prune + self.change + self.swap;
        let p = match kind {
            MoveKind::Grow => self.grow,
            MoveKind::Prune => self.prune,
            MoveKind::Change => self.change,
            MoveKind::Swap => self.swap,
        };
        p / total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub moves: MoveProbabilities,
    /// Proposals leaving a new or rearranged leaf with fewer active rows than
    /// this are rejected.
    pub min_leaf_size: u32,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            moves: MoveProbabilities::default(),
            min_leaf_size: 5,
        }
    }
}

/// Per-row view of the data one tree is fit to.
///
/// `counts[i]` is the number of observations row `i` contributes (0 marks an
/// inactive row that is routed but carries no likelihood), `sums[i]` the sum
/// of its partial residuals.
#[derive(Debug, Clone, Copy)]
pub struct TreeData<'a> {
    pub design: &'a Design,
    pub counts: &'a [u32],
    pub sums: &'a [f64],
}

impl<'a> TreeData<'a> {
    pub fn new(design: &'a Design, counts: &'a [u32], sums: &'a [f64]) -> Self {
        assert_eq!(counts.len(), design.n_rows());
        assert_eq!(sums.len(), design.n_rows());
        TreeData {
            design,
            counts,
            sums,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub kind: MoveKind,
    pub tree: Tree,
    /// `log q(candidate -> current) - log q(current -> candidate)`.
    pub log_transition_ratio: f64,
    /// Node the move acted on, as indexed in the candidate tree.
    pub node: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProposalOutcome {
    Candidate(Proposal),
    /// The move cannot be applied to this tree; counts as a rejection.
    NoOp(MoveKind),
}

/// Routes every row of `design` through `tree`.
pub fn assign(tree: &Tree, design: &Design, out: &mut Vec<u32>) {
    out.clear();
    out.extend((0..design.n_rows()).map(|r| tree.leaf_of(design, r) as u32));
}

/// Draws a move type and proposes it.
pub fn propose_move<R: Rng + ?Sized>(
    tree: &Tree,
    data: &TreeData<'_>,
    assignment: &[u32],
    moves: &MoveProbabilities,
    rng: &mut R,
) -> ProposalOutcome {
    let kind = moves.pick(rng);
    propose_specific(kind, tree, data, assignment, moves, rng)
}

/// Proposes a move of the given type. `assignment` must be the current leaf
/// of every row.
pub fn propose_specific<R: Rng + ?Sized>(
    kind: MoveKind,
    tree: &Tree,
    data: &TreeData<'_>,
    assignment: &[u32],
    moves: &MoveProbabilities,
    rng: &mut R,
) -> ProposalOutcome {
    let n_features = data.design.n_features();
    match kind {
        MoveKind::Grow => {
            if n_features == 0 {
                return ProposalOutcome::NoOp(kind);
            }
            let leaves: Vec<usize> = tree.leaves().collect();
            let leaf = leaves[rng.random_range(0..leaves.len())];
            let feature = rng.random_range(0..n_features);
            let values = distinct_values(data, assignment, feature, leaf, leaf + 1);
            if values.is_empty() {
                return ProposalOutcome::NoOp(kind);
            }
            let threshold = values[rng.random_range(0..values.len())];
            let rule = SplitRule::new(feature, threshold, random_direction(rng));
            let candidate = tree.grown(leaf, rule);
            let n_prunable_after = candidate.prunable_nodes().len() as f64;
            let log_q = (moves.of(MoveKind::Prune) / n_prunable_after).ln()
                - (moves.of(MoveKind::Grow) / leaves.len() as f64).ln();
            ProposalOutcome::Candidate(Proposal {
                kind,
                tree: candidate,
                log_transition_ratio: log_q,
                node: leaf,
            })
        }
        MoveKind::Prune => {
            let prunable = tree.prunable_nodes();
            if prunable.is_empty() {
                return ProposalOutcome::NoOp(kind);
            }
            let node = prunable[rng.random_range(0..prunable.len())];
            let candidate = tree.pruned(node);
            let log_q = (moves.of(MoveKind::Grow) / candidate.n_leaves() as f64).ln()
                - (moves.of(MoveKind::Prune) / prunable.len() as f64).ln();
            ProposalOutcome::Candidate(Proposal {
                kind,
                tree: candidate,
                log_transition_ratio: log_q,
                node,
            })
        }
        MoveKind::Change => {
            let internal: Vec<usize> = tree.internal_nodes().collect();
            if internal.is_empty() || n_features == 0 {
                return ProposalOutcome::NoOp(kind);
            }
            let node = internal[rng.random_range(0..internal.len())];
            let feature = rng.random_range(0..n_features);
            let values = distinct_values(data, assignment, feature, node, tree.subtree_end(node));
            if values.is_empty() {
                return ProposalOutcome::NoOp(kind);
            }
            let threshold = values[rng.random_range(0..values.len())];
            let rule = SplitRule::new(feature, threshold, random_direction(rng));
            // The rule-selection probability appears in both the prior and the
            // proposal and cancels, so the ratio is 1.
            ProposalOutcome::Candidate(Proposal {
                kind,
                tree: tree.with_rule(node, rule),
                log_transition_ratio: 0.0,
                node,
            })
        }
        MoveKind::Swap => {
            let pairs = tree.swappable_pairs();
            if pairs.is_empty() {
                return ProposalOutcome::NoOp(kind);
            }
            let (parent, child) = pairs[rng.random_range(0..pairs.len())];
            let parent_rule = *tree.rule(parent).expect("internal");
            let child_rule = *tree.rule(child).expect("internal");
            let candidate = tree
                .with_rule(parent, child_rule)
                .with_rule(child, parent_rule);
            ProposalOutcome::Candidate(Proposal {
                kind,
                tree: candidate,
                log_transition_ratio: 0.0,
                node: parent,
            })
        }
    }
}

fn random_direction<R: Rng + ?Sized>(rng: &mut R) -> Direction {
    if rng.random::<bool>() {
        Direction::Left
    } else {
        Direction::Right
    }
}

/// Sorted distinct observed values of `feature` among active rows whose leaf
/// lies in the node range `[lo, hi)`.
fn distinct_values(
    data: &TreeData<'_>,
    assignment: &[u32],
    feature: usize,
    lo: usize,
    hi: usize,
) -> Vec<f64> {
    let all = data.design.distinct(feature);
    let ranks = data.design.ranks(feature);
    let mut seen = vec![false; all.len()];
    for ((&leaf, &rank), &count) in assignment.iter().zip(ranks).zip(data.counts) {
        if rank != MISSING_RANK && count > 0 && (lo..hi).contains(&(leaf as usize)) {
            seen[rank as usize] = true;
        }
    }
    all.iter()
        .zip(seen)
        .filter_map(|(v, s)| s.then_some(*v))
        .collect()
}

/// Outcome of one Metropolis-Hastings update of a tree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MhStep {
    pub proposed: MoveKind,
    /// `None` when the proposal was a no-op or failed the leaf-size check.
    pub log_acceptance: Option<f64>,
    pub accepted: bool,
}

/// Reusable MH-then-Gibbs updater for trees sharing one set of priors.
#[derive(Debug, Clone)]
pub struct TreeSampler {
    pub config: KernelConfig,
    pub tree_prior: TreePrior,
    pub leaf_prior: LeafPrior,
    candidate_assignment: Vec<u32>,
    stats: Vec<LeafStats>,
    candidate_stats: Vec<LeafStats>,
    candidate_rows: Vec<u32>,
}

impl TreeSampler {
    pub fn new(config: KernelConfig, tree_prior: TreePrior, leaf_prior: LeafPrior) -> Self {
        TreeSampler {
            config,
            tree_prior,
            leaf_prior,
            candidate_assignment: Vec::new(),
            stats: Vec::new(),
            candidate_stats: Vec::new(),
            candidate_rows: Vec::new(),
        }
    }

    /// Proposes a structure change, accepts or rejects it, then redraws all
    /// leaf values. `assignment` holds each row's current leaf and is
    /// updated to match the returned tree.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        tree: &mut Tree,
        assignment: &mut Vec<u32>,
        data: &TreeData<'_>,
        sigma2: f64,
        rng: &mut R,
    ) -> MhStep {
        debug_assert_eq!(assignment.len(), data.design.n_rows());
        leaf_stats(tree, assignment, data, &mut self.stats, None);

        let outcome = propose_move(tree, data, assignment, &self.config.moves, rng);
        let mut result = MhStep {
            proposed: match &outcome {
                ProposalOutcome::Candidate(p) => p.kind,
                ProposalOutcome::NoOp(k) => *k,
            },
            log_acceptance: None,
            accepted: false,
        };

        if let ProposalOutcome::Candidate(proposal) = outcome {
            assign(&proposal.tree, data.design, &mut self.candidate_assignment);
            leaf_stats(
                &proposal.tree,
                &self.candidate_assignment,
                data,
                &mut self.candidate_stats,
                Some(&mut self.candidate_rows),
            );
            if self.leaf_sizes_ok(&proposal) {
                let log_lik = |t: &Tree, s: &[LeafStats]| -> f64 {
                    t.leaves()
                        .map(|l| s[l].log_kernel(sigma2, self.leaf_prior))
                        .sum()
                };
                let log_alpha = self.tree_prior.log_prior(&proposal.tree)
                    - self.tree_prior.log_prior(tree)
                    + log_lik(&proposal.tree, &self.candidate_stats)
                    - log_lik(tree, &self.stats)
                    + proposal.log_transition_ratio;
                result.log_acceptance = Some(log_alpha);
                if rng.random::<f64>().ln() < log_alpha {
                    result.accepted = true;
                    *tree = proposal.tree;
                    std::mem::swap(assignment, &mut self.candidate_assignment);
                    std::mem::swap(&mut self.stats, &mut self.candidate_stats);
                }
            }
        }

        sample_leaf_values(tree, &self.stats, sigma2, self.leaf_prior, rng);
        result
    }

    fn leaf_sizes_ok(&self, p: &Proposal) -> bool {
        let min = self.config.min_leaf_size;
        let rows = &self.candidate_rows;
        match p.kind {
            MoveKind::Grow => rows[p.node + 1] >= min && rows[p.node + 2] >= min,
            MoveKind::Prune => true,
            MoveKind::Change | MoveKind::Swap => (p.node..p.tree.subtree_end(p.node))
                .filter(|&id| p.tree.node(id).is_leaf())
                .all(|id| rows[id] >= min),
        }
    }
}

fn leaf_stats(
    tree: &Tree,
    assignment: &[u32],
    data: &TreeData<'_>,
    stats: &mut Vec<LeafStats>,
    mut rows: Option<&mut Vec<u32>>,
) {
    let n_nodes = tree.nodes().len();
    stats.clear();
    stats.resize(n_nodes, LeafStats::default());
    if let Some(r) = rows.as_deref_mut() {
        r.clear();
        r.resize(n_nodes, 0);
    }
    for (i, &leaf) in assignment.iter().enumerate() {
        let c = data.counts[i];
        if c == 0 {
            continue;
        }
        stats[leaf as usize].add(c, data.sums[i]);
        if let Some(r) = rows.as_deref_mut() {
            r[leaf as usize] += 1;
        }
    }
}
