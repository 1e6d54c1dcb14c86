//! Binary regression trees and the MCMC kernel shared by every forest.
//!
//! A [`Tree`] is stored as a flat arena in canonical pre-order: the root is
//! node 0, a split's left child immediately follows it, and the nodes of any
//! subtree occupy a contiguous index range. Two trees with the same
//! structure, rules and leaf values therefore compare equal, and the
//! pre-order node list doubles as the serialized record stream.
//!
//! Observations are routed with [`SplitRule::route`]: an observed value
//! `<= threshold` goes left, a larger value goes right, and a missing value
//! (NaN) follows the rule's `missing_goes` direction.

mod design;
mod forest;
mod leaf;
mod moves;

pub use design::Design;
pub use forest::Forest;
pub use leaf::{
    log_marginal_likelihood, sample_leaf_values, LeafPrior, LeafStats,
};
pub use moves::{
    assign, propose_move, propose_specific, KernelConfig, MhStep, MoveKind, MoveProbabilities,
    Proposal, ProposalOutcome, TreeData, TreeSampler,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which child receives an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Left,
    Right,
}

/// A univariate split with an explicit direction for missing values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRule {
    pub feature: usize,
    pub threshold: f64,
    pub missing_goes: Direction,
}

impl SplitRule {
    pub fn new(feature: usize, threshold: f64, missing_goes: Direction) -> Self {
        SplitRule {
            feature,
            threshold,
            missing_goes,
        }
    }

    #[inline]
    pub fn route(&self, value: f64) -> Direction {
        if value.is_nan() {
            self.missing_goes
        } else if value <= self.threshold {
            Direction::Left
        } else {
            Direction::Right
        }
    }
}

/// Role of a forest inside a model. Waves are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ForestKind {
    Mu,
    Delta(usize),
    Tau(usize),
    /// Single-forest BART on a differenced outcome.
    Difference(usize),
    /// Probit forest used to estimate treatment propensity.
    Propensity(usize),
}

impl std::fmt::Display for ForestKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ForestKind::Mu => write!(f, "mu"),
            ForestKind::Delta(w) => write!(f, "delta.{w}"),
            ForestKind::Tau(w) => write!(f, "tau.{w}"),
            ForestKind::Difference(w) => write!(f, "diff.{w}"),
            ForestKind::Propensity(w) => write!(f, "propensity.{w}"),
        }
    }
}

impl std::str::FromStr for ForestKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownForest(s.to_string());
        if s == "mu" {
            return Ok(ForestKind::Mu);
        }
        let (head, wave) = s.split_once('.').ok_or_else(bad)?;
        let wave: usize = wave.parse().map_err(|_| bad())?;
        match head {
            "delta" => Ok(ForestKind::Delta(wave)),
            "tau" => Ok(ForestKind::Tau(wave)),
            "diff" => Ok(ForestKind::Difference(wave)),
            "propensity" => Ok(ForestKind::Propensity(wave)),
            _ => Err(bad()),
        }
    }
}

/// Contents of one arena slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeKind {
    Leaf { value: f64 },
    Split {
        rule: SplitRule,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeNode {
    pub depth: u32,
    pub kind: NodeKind,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf { .. })
    }
}

/// One entry of the pre-order record stream used for serialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "k")]
pub enum NodeRecord {
    #[serde(rename = "L")]
    Leaf {
        #[serde(rename = "v")]
        value: f64,
    },
    #[serde(rename = "S")]
    Split {
        #[serde(rename = "f")]
        feature: usize,
        #[serde(rename = "t")]
        threshold: f64,
        #[serde(rename = "m")]
        missing_goes: Direction,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    kind: ForestKind,
    nodes: Vec<TreeNode>,
}

impl Tree {
    /// A single leaf holding 0.
    pub fn stump(kind: ForestKind) -> Self {
        Tree {
            kind,
            nodes: vec![TreeNode {
                depth: 0,
                kind: NodeKind::Leaf { value: 0.0 },
            }],
        }
    }

    pub fn kind(&self) -> ForestKind {
        self.kind
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn is_stump(&self) -> bool {
        self.nodes.len() == 1
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_leaf())
            .map(|(i, _)| i)
    }

    pub fn internal_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| !n.is_leaf())
            .map(|(i, _)| i)
    }

    /// Internal nodes whose two children are both leaves.
    pub fn prunable_nodes(&self) -> Vec<usize> {
        self.internal_nodes()
            .filter(|&i| {
                let (l, r) = self.children(i).expect("internal");
                self.nodes[l].is_leaf() && self.nodes[r].is_leaf()
            })
            .collect()
    }

    /// (parent, child) pairs where both are internal nodes.
    pub fn swappable_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for i in self.internal_nodes() {
            let (l, r) = self.children(i).expect("internal");
            for c in [l, r] {
                if !self.nodes[c].is_leaf() {
                    pairs.push((i, c));
                }
            }
        }
        pairs
    }

    pub fn children(&self, id: usize) -> Option<(usize, usize)> {
        match self.nodes[id].kind {
            NodeKind::Split { left, right, .. } => Some((left, right)),
            NodeKind::Leaf { .. } => None,
        }
    }

    pub fn rule(&self, id: usize) -> Option<&SplitRule> {
        match &self.nodes[id].kind {
            NodeKind::Split { rule, .. } => Some(rule),
            NodeKind::Leaf { .. } => None,
        }
    }

    pub fn leaf_value(&self, id: usize) -> f64 {
        match self.nodes[id].kind {
            NodeKind::Leaf { value } => value,
            NodeKind::Split { .. } => panic!("node {id} is not a leaf"),
        }
    }

    pub fn set_leaf_value(&mut self, id: usize, value: f64) {
        match &mut self.nodes[id].kind {
            NodeKind::Leaf { value: v } => *v = value,
            NodeKind::Split { .. } => panic!("node {id} is not a leaf"),
        }
    }

    /// One past the last index of the subtree rooted at `id`.
    pub fn subtree_end(&self, mut id: usize) -> usize {
        while let NodeKind::Split { right, .. } = self.nodes[id].kind {
            id = right;
        }
        id + 1
    }

    /// Largest feature index referenced by any split.
    pub fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n.kind {
                NodeKind::Split { rule, .. } => Some(rule.feature),
                NodeKind::Leaf { .. } => None,
            })
            .max()
    }

    /// Routes a covariate vector (NaN = missing) to a leaf id.
    pub fn traverse(&self, row: &[f64]) -> Result<usize> {
        let mut id = 0;
        loop {
            match self.nodes[id].kind {
                NodeKind::Leaf { .. } => return Ok(id),
                NodeKind::Split { rule, left, right } => {
                    let value = *row.get(rule.feature).ok_or_else(|| {
                        Error::Structure(format!(
                            "node {id} splits on feature {} but the row has {} features",
                            rule.feature,
                            row.len()
                        ))
                    })?;
                    id = match rule.route(value) {
                        Direction::Left => left,
                        Direction::Right => right,
                    };
                }
            }
        }
    }

    /// Routes row `row` of `design`. The tree must have been checked with
    /// [`Tree::check_design`].
    #[inline]
    pub fn leaf_of(&self, design: &Design, row: usize) -> usize {
        let mut id = 0;
        loop {
            match self.nodes[id].kind {
                NodeKind::Leaf { .. } => return id,
                NodeKind::Split { rule, left, right } => {
                    id = match rule.route(design.value(row, rule.feature)) {
                        Direction::Left => left,
                        Direction::Right => right,
                    };
                }
            }
        }
    }

    #[inline]
    pub fn predict_row(&self, design: &Design, row: usize) -> f64 {
        self.leaf_value(self.leaf_of(design, row))
    }

    pub fn check_design(&self, design: &Design) -> Result<()> {
        match self.max_feature() {
            Some(f) if f >= design.n_features() => Err(Error::Structure(format!(
                "{} tree splits on feature {f} but the design has {} columns",
                self.kind,
                design.n_features()
            ))),
            _ => Ok(()),
        }
    }

    /// Number of splits on each feature.
    pub fn split_counts(&self, n_features: usize) -> Vec<usize> {
        let mut counts = vec![0; n_features];
        for n in &self.nodes {
            if let NodeKind::Split { rule, .. } = n.kind {
                if rule.feature < n_features {
                    counts[rule.feature] += 1;
                }
            }
        }
        counts
    }

    pub fn to_records(&self) -> Vec<NodeRecord> {
        self.nodes
            .iter()
            .map(|n| match n.kind {
                NodeKind::Leaf { value } => NodeRecord::Leaf { value },
                NodeKind::Split { rule, .. } => NodeRecord::Split {
                    feature: rule.feature,
                    threshold: rule.threshold,
                    missing_goes: rule.missing_goes,
                },
            })
            .collect()
    }

    /// Rebuilds a tree from its pre-order record stream.
    pub fn from_records(kind: ForestKind, records: &[NodeRecord]) -> Result<Self> {
        fn build(
            records: &[NodeRecord],
            pos: &mut usize,
            depth: u32,
            out: &mut Vec<TreeNode>,
        ) -> Result<usize> {
            let rec = records.get(*pos).ok_or_else(|| {
                Error::Structure("node stream ended inside a split".to_string())
            })?;
            *pos += 1;
            let id = out.len();
            match *rec {
                NodeRecord::Leaf { value } => {
                    out.push(TreeNode {
                        depth,
                        kind: NodeKind::Leaf { value },
                    });
                }
                NodeRecord::Split {
                    feature,
                    threshold,
                    missing_goes,
                } => {
                    if !threshold.is_finite() {
                        return Err(Error::Structure(format!(
                            "non-finite threshold at node {id}"
                        )));
                    }
                    out.push(TreeNode {
                        depth,
                        kind: NodeKind::Leaf { value: 0.0 },
                    });
                    let left = build(records, pos, depth + 1, out)?;
                    let right = build(records, pos, depth + 1, out)?;
                    out[id].kind = NodeKind::Split {
                        rule: SplitRule::new(feature, threshold, missing_goes),
                        left,
                        right,
                    };
                }
            }
            Ok(id)
        }

        let mut nodes = Vec::with_capacity(records.len());
        let mut pos = 0;
        build(records, &mut pos, 0, &mut nodes)?;
        if pos != records.len() {
            return Err(Error::Structure(format!(
                "{} trailing records after a complete tree",
                records.len() - pos
            )));
        }
        Ok(Tree { kind, nodes })
    }

    /// Replaces leaf `id` with a split whose two children inherit its value.
    pub(crate) fn grown(&self, id: usize, rule: SplitRule) -> Tree {
        let value = self.leaf_value(id);
        let mut arena = self.nodes.clone();
        let depth = arena[id].depth + 1;
        let left = arena.len();
        arena.push(TreeNode {
            depth,
            kind: NodeKind::Leaf { value },
        });
        arena.push(TreeNode {
            depth,
            kind: NodeKind::Leaf { value },
        });
        arena[id].kind = NodeKind::Split {
            rule,
            left,
            right: left + 1,
        };
        Tree::canonical(self.kind, &arena)
    }

    /// Collapses internal node `id` (whose children are leaves) into a leaf
    /// carrying the left child's value.
    pub(crate) fn pruned(&self, id: usize) -> Tree {
        let (left, _) = self.children(id).expect("prune target must be internal");
        let value = self.leaf_value(left);
        let mut arena = self.nodes.clone();
        arena[id].kind = NodeKind::Leaf { value };
        Tree::canonical(self.kind, &arena)
    }

    pub(crate) fn with_rule(&self, id: usize, new_rule: SplitRule) -> Tree {
        let mut t = self.clone();
        if let NodeKind::Split { rule, .. } = &mut t.nodes[id].kind {
            *rule = new_rule;
        }
        t
    }

    /// Re-lays out reachable nodes of `arena` in pre-order from node 0.
    fn canonical(kind: ForestKind, arena: &[TreeNode]) -> Tree {
        fn walk(arena: &[TreeNode], id: usize, depth: u32, out: &mut Vec<TreeNode>) -> usize {
            let new_id = out.len();
            out.push(TreeNode {
                depth,
                kind: arena[id].kind,
            });
            if let NodeKind::Split { rule, left, right } = arena[id].kind {
                let l = walk(arena, left, depth + 1, out);
                let r = walk(arena, right, depth + 1, out);
                out[new_id].kind = NodeKind::Split {
                    rule,
                    left: l,
                    right: r,
                };
            }
            new_id
        }
        let mut out = Vec::with_capacity(arena.len());
        walk(arena, 0, 0, &mut out);
        Tree { kind, nodes: out }
    }
}

/// Depth-dependent split probability `alpha * (1 + depth)^(-beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreePrior {
    pub alpha: f64,
    pub beta: f64,
}

impl TreePrior {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) || !(beta >= 0.0) {
            return Err(Error::Validation(format!(
                "tree prior needs 0 < alpha < 1 and beta >= 0, got alpha={alpha}, beta={beta}"
            )));
        }
        Ok(TreePrior { alpha, beta })
    }

    #[inline]
    pub fn split_probability(&self, depth: u32) -> f64 {
        self.alpha * (1.0 + depth as f64).powf(-self.beta)
    }

    pub fn log_prior(&self, tree: &Tree) -> f64 {
        log_tree_prior(tree, self.alpha, self.beta)
    }
}

/// Log prior probability of the tree's shape: every internal node at depth
/// `d` contributes `log(alpha (1+d)^-beta)`, every leaf `log(1 - alpha (1+d)^-beta)`.
pub fn log_tree_prior(tree: &Tree, alpha: f64, beta: f64) -> f64 {
    tree.nodes
        .iter()
        .map(|n| {
            let p = alpha * (1.0 + n.depth as f64).powf(-beta);
            if n.is_leaf() {
                (1.0 - p).ln()
            } else {
                p.ln()
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_split(missing: Direction) -> Tree {
        Tree::stump(ForestKind::Mu).grown(0, SplitRule::new(0, 0.5, missing))
    }

    #[test]
    fn routing_follows_threshold_and_missing_direction() {
        let mut t = one_split(Direction::Left);
        t.set_leaf_value(1, -1.0);
        t.set_leaf_value(2, 1.0);
        assert_eq!(t.traverse(&[0.3]).unwrap(), 1);
        assert_eq!(t.traverse(&[f64::NAN]).unwrap(), 1);
        assert_eq!(t.traverse(&[0.7]).unwrap(), 2);
        // ties go left
        assert_eq!(t.traverse(&[0.5]).unwrap(), 1);

        let t = one_split(Direction::Right);
        assert_eq!(t.traverse(&[f64::NAN]).unwrap(), 2);
    }

    #[test]
    fn traverse_rejects_short_rows() {
        let t = Tree::stump(ForestKind::Mu).grown(0, SplitRule::new(3, 0.0, Direction::Left));
        assert!(matches!(t.traverse(&[1.0, 2.0]), Err(Error::Structure(_))));
        let d = Design::from_columns(vec![vec![1.0], vec![2.0]]);
        assert!(t.check_design(&d).is_err());
    }

    #[test]
    fn stump_prior() {
        let t = Tree::stump(ForestKind::Mu);
        assert_relative_eq!(log_tree_prior(&t, 0.95, 2.0), 0.05f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(log_tree_prior(&t, 0.95, 2.0), -2.9957, epsilon = 1e-4);
        assert_relative_eq!(log_tree_prior(&t, 0.25, 3.0), -0.2877, epsilon = 1e-4);
        for beta in [0.0, 0.5, 2.0, 7.0] {
            assert_relative_eq!(log_tree_prior(&t, 0.6, beta).exp(), 0.4, epsilon = 1e-12);
        }
    }

    #[test]
    fn one_split_prior_matches_hand_value() {
        let t = one_split(Direction::Left);
        // log(0.95) + 2 log(1 - 0.95/4), evaluated independently
        assert_relative_eq!(log_tree_prior(&t, 0.95, 2.0), -0.593_598_835_388_691_4, epsilon = 1e-12);
    }

    #[test]
    fn canonical_layout_after_grow() {
        let t = one_split(Direction::Left);
        let t = t.grown(2, SplitRule::new(0, 0.8, Direction::Right));
        let t = t.grown(1, SplitRule::new(0, 0.2, Direction::Left));
        // pre-order: root, left split, its leaves, right split, its leaves
        let depths: Vec<u32> = t.nodes().iter().map(|n| n.depth).collect();
        assert_eq!(depths, vec![0, 1, 2, 2, 1, 2, 2]);
        assert_eq!(t.children(0), Some((1, 4)));
        assert_eq!(t.subtree_end(1), 4);
        assert_eq!(t.subtree_end(0), 7);
        assert_eq!(t.prunable_nodes(), vec![1, 4]);
        assert_eq!(t.swappable_pairs(), vec![(0, 1), (0, 4)]);
    }

    #[test]
    fn grow_then_prune_is_identity() {
        let base = one_split(Direction::Right);
        let grown = base.grown(2, SplitRule::new(0, 0.9, Direction::Left));
        assert_eq!(grown.pruned(2), base);
    }

    #[test]
    fn records_round_trip() {
        let mut t = one_split(Direction::Right)
            .grown(1, SplitRule::new(2, -0.125, Direction::Left));
        t.set_leaf_value(2, 0.1 + 0.2);
        let back = Tree::from_records(ForestKind::Tau(2), &t.to_records()).unwrap();
        assert_eq!(back.nodes(), t.nodes());
    }

    #[test]
    fn malformed_record_streams() {
        let split = NodeRecord::Split {
            feature: 0,
            threshold: 0.0,
            missing_goes: Direction::Left,
        };
        let leaf = NodeRecord::Leaf { value: 0.0 };
        assert!(Tree::from_records(ForestKind::Mu, &[split, leaf]).is_err());
        assert!(Tree::from_records(ForestKind::Mu, &[leaf, leaf]).is_err());
        assert!(Tree::from_records(ForestKind::Mu, &[]).is_err());
    }

    #[test]
    fn forest_kind_names() {
        for k in [ForestKind::Mu, ForestKind::Delta(3), ForestKind::Tau(2)] {
            assert_eq!(k.to_string().parse::<ForestKind>().unwrap(), k);
        }
        assert!("gamma.2".parse::<ForestKind>().is_err());
        assert!("tau".parse::<ForestKind>().is_err());
    }
}
