/// Rank of a missing cell.
pub const MISSING_RANK: u32 = u32::MAX;

/// Column-major covariate matrix seen by one forest. Missing cells are NaN.
///
/// Each column also keeps its sorted distinct observed values and every
/// cell's rank among them, so split candidates inside a node can be listed
/// without sorting.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    n_rows: usize,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    uniques: Vec<Vec<f64>>,
    ranks: Vec<Vec<u32>>,
}

fn rank_column(col: &[f64]) -> (Vec<f64>, Vec<u32>) {
    let mut order: Vec<usize> = (0..col.len()).filter(|&i| !col[i].is_nan()).collect();
    order.sort_unstable_by(|&a, &b| col[a].total_cmp(&col[b]));
    let mut uniques: Vec<f64> = Vec::new();
    let mut ranks = vec![MISSING_RANK; col.len()];
    for i in order {
        if uniques.last() != Some(&col[i]) {
            uniques.push(col[i]);
        }
        ranks[i] = (uniques.len() - 1) as u32;
    }
    (uniques, ranks)
}

impl Design {
    /// Builds a design from named columns of equal length.
    ///
    /// Panics if the columns have different lengths.
    pub fn new(n_rows: usize, columns: Vec<(String, Vec<f64>)>) -> Self {
        let mut design = Design {
            n_rows,
            names: Vec::with_capacity(columns.len()),
            columns: Vec::with_capacity(columns.len()),
            uniques: Vec::with_capacity(columns.len()),
            ranks: Vec::with_capacity(columns.len()),
        };
        for (name, col) in columns {
            assert_eq!(col.len(), n_rows, "column `{name}` has wrong length");
            design.push_column(name, col);
        }
        design
    }

    /// A design with unnamed columns `c0, c1, ...`.
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Self {
        let n_rows = columns.first().map_or(0, Vec::len);
        let named = columns
            .into_iter()
            .enumerate()
            .map(|(j, c)| (format!("c{j}"), c))
            .collect();
        Design::new(n_rows, named)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, feature: usize) -> &[f64] {
        &self.columns[feature]
    }

    #[inline]
    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.columns[feature][row]
    }

    /// Copies one row out, NaN marking missing cells.
    pub fn row(&self, row: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[row]).collect()
    }

    /// Appends a column, returning its index.
    pub fn push_column(&mut self, name: impl Into<String>, values: Vec<f64>) -> usize {
        assert_eq!(values.len(), self.n_rows);
        let (uniques, ranks) = rank_column(&values);
        self.names.push(name.into());
        self.columns.push(values);
        self.uniques.push(uniques);
        self.ranks.push(ranks);
        self.columns.len() - 1
    }

    /// Sorted distinct observed values of a column.
    pub fn distinct(&self, feature: usize) -> &[f64] {
        &self.uniques[feature]
    }

    /// Each cell's index into [`Design::distinct`], or [`MISSING_RANK`].
    pub fn ranks(&self, feature: usize) -> &[u32] {
        &self.ranks[feature]
    }
}
