use serde::{Deserialize, Serialize};

use super::{Design, ForestKind, NodeRecord, Tree};
use crate::error::{Error, Result};

/// An ordered collection of trees of one kind whose predictions add up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ForestRecord", into = "ForestRecord")]
pub struct Forest {
    kind: ForestKind,
    trees: Vec<Tree>,
}

#[derive(Serialize, Deserialize)]
struct ForestRecord {
    kind: String,
    trees: Vec<Vec<NodeRecord>>,
}

impl From<Forest> for ForestRecord {
    fn from(f: Forest) -> Self {
        ForestRecord {
            kind: f.kind.to_string(),
            trees: f.trees.iter().map(Tree::to_records).collect(),
        }
    }
}

impl TryFrom<ForestRecord> for Forest {
    type Error = Error;

    fn try_from(r: ForestRecord) -> Result<Self> {
        let kind: ForestKind = r.kind.parse()?;
        let trees = r
            .trees
            .iter()
            .map(|recs| Tree::from_records(kind, recs))
            .collect::<Result<_>>()?;
        Ok(Forest { kind, trees })
    }
}

impl Forest {
    pub fn new(kind: ForestKind, trees: Vec<Tree>) -> Result<Self> {
        if let Some(t) = trees.iter().find(|t| t.kind() != kind) {
            return Err(Error::Structure(format!(
                "{} tree placed in a {kind} forest",
                t.kind()
            )));
        }
        Ok(Forest { kind, trees })
    }

    /// `n` stumps at 0.
    pub fn stumps(kind: ForestKind, n: usize) -> Self {
        Forest {
            kind,
            trees: vec![Tree::stump(kind); n],
        }
    }

    pub fn kind(&self) -> ForestKind {
        self.kind
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn check_design(&self, design: &Design) -> Result<()> {
        self.trees.iter().try_for_each(|t| t.check_design(design))
    }

    /// Sum of the trees' predictions for one row, accumulated in tree order.
    #[inline]
    pub fn predict_row(&self, design: &Design, row: usize) -> f64 {
        self.trees
            .iter()
            .fold(0.0, |acc, t| acc + t.predict_row(design, row))
    }

    /// Predictions for every row of a checked design.
    pub fn predict(&self, design: &Design) -> Vec<f64> {
        (0..design.n_rows())
            .map(|r| self.predict_row(design, r))
            .collect()
    }

    /// Splits per feature, summed over trees.
    pub fn split_counts(&self, n_features: usize) -> Vec<usize> {
        let mut counts = vec![0; n_features];
        for t in &self.trees {
            for (c, k) in counts.iter_mut().zip(t.split_counts(n_features)) {
                *c += k;
            }
        }
        counts
    }
}
