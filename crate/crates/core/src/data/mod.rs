//! Panel data: outcomes per wave, wave-tagged covariates, treatment
//! indicators, weights and plausible-value replicates.
//!
//! Waves are numbered from 1. Outcome `y_{i,t}` may be missing only under
//! monotone dropout: once a subject misses a wave it misses every later
//! wave. Treatment indicators exist for waves `2..=T` and may be missing
//! independently of the outcome. Missing numeric cells are stored as NaN.

mod csv_io;

pub use csv_io::{load_csv, load_csv_with_encoding, read_csv_from, SchemaSpec};

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One covariate column after encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariate {
    /// Column label: `<name>.<wave>` for numeric columns, `<name>.<wave>=<level>`
    /// for one-hot indicators.
    pub label: String,
    /// Earliest wave at which the column is available.
    pub wave: usize,
    /// For one-hot indicators, the label of the categorical column.
    pub parent: Option<String>,
    pub values: Vec<f64>,
}

impl Covariate {
    pub fn numeric(name: &str, wave: usize, values: Vec<f64>) -> Self {
        Covariate {
            label: format!("{name}.{wave}"),
            wave,
            parent: None,
            values,
        }
    }

    /// Name used when aggregating importance: the parent categorical for
    /// one-hot columns, the label otherwise.
    pub fn group(&self) -> &str {
        self.parent.as_deref().unwrap_or(&self.label)
    }
}

/// Level maps for categorical columns, keyed by `<name>.<wave>`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Encoding {
    pub categorical: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    ids: Vec<String>,
    outcomes: Vec<Vec<f64>>,
    treatments: Vec<Vec<Option<bool>>>,
    covariates: Vec<Covariate>,
    weights: Vec<f64>,
    plausible_values: Vec<Vec<Vec<f64>>>,
    propensity: Vec<Option<Vec<f64>>>,
    encoding: Encoding,
    replicate: Option<usize>,
    warnings: Vec<String>,
}

impl PanelDataset {
    /// `outcomes[t-1][i]` is `y_{i,t}`; `treatments[w-2][i]` is `Z_{i,w}`.
    pub fn new(
        ids: Vec<String>,
        outcomes: Vec<Vec<f64>>,
        treatments: Vec<Vec<Option<bool>>>,
        covariates: Vec<Covariate>,
    ) -> Result<Self> {
        let n = ids.len();
        let n_waves = outcomes.len();
        if n_waves == 0 {
            return Err(Error::Validation("dataset needs at least one wave".into()));
        }
        if treatments.len() != n_waves - 1 {
            return Err(Error::Validation(format!(
                "{} waves need {} treatment columns, got {}",
                n_waves,
                n_waves - 1,
                treatments.len()
            )));
        }
        for (t, y) in outcomes.iter().enumerate() {
            if y.len() != n {
                return Err(Error::Validation(format!("y.{} has wrong length", t + 1)));
            }
            if y.iter().any(|v| v.is_infinite()) {
                return Err(Error::Validation(format!("y.{} has a non-finite value", t + 1)));
            }
        }
        for (w, z) in treatments.iter().enumerate() {
            if z.len() != n {
                return Err(Error::Validation(format!("z.{} has wrong length", w + 2)));
            }
        }
        let mut seen = HashSet::new();
        for c in &covariates {
            if c.values.len() != n {
                return Err(Error::Validation(format!("covariate {} has wrong length", c.label)));
            }
            if c.wave == 0 || c.wave > n_waves {
                return Err(Error::Validation(format!(
                    "covariate {} tagged with wave {} outside 1..={n_waves}",
                    c.label, c.wave
                )));
            }
            if !seen.insert(c.label.as_str()) {
                return Err(Error::Validation(format!("duplicate covariate {}", c.label)));
            }
        }
        let mut id_set = HashSet::new();
        for id in &ids {
            if !id_set.insert(id.as_str()) {
                return Err(Error::Validation(format!("duplicate subject id `{id}`")));
            }
        }
        check_monotone(&ids, &outcomes)?;

        Ok(PanelDataset {
            weights: vec![1.0; n],
            propensity: vec![None; n_waves - 1],
            ids,
            outcomes,
            treatments,
            covariates,
            plausible_values: Vec::new(),
            encoding: Encoding::default(),
            replicate: None,
            warnings: Vec::new(),
        })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.n_subjects() {
            return Err(Error::Validation("weights have wrong length".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Validation("weights must be finite and non-negative".into()));
        }
        if !weights.iter().any(|w| *w > 0.0) {
            return Err(Error::Validation("at least one weight must be positive".into()));
        }
        self.weights = weights;
        Ok(self)
    }

    /// Attaches replicate outcome sets, `pvs[k][t-1][i]`. Every replicate
    /// must share the base observation mask.
    pub fn with_plausible_values(mut self, pvs: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        for (k, pv) in pvs.iter().enumerate() {
            if pv.len() != self.n_waves() {
                return Err(Error::Validation(format!(
                    "plausible value {} has {} waves, expected {}",
                    k + 1,
                    pv.len(),
                    self.n_waves()
                )));
            }
            for (t, (a, b)) in pv.iter().zip(&self.outcomes).enumerate() {
                if a.len() != b.len() {
                    return Err(Error::Validation(format!(
                        "plausible value {} wave {} has wrong length",
                        k + 1,
                        t + 1
                    )));
                }
                if let Some(i) = (0..a.len()).find(|&i| a[i].is_nan() != b[i].is_nan()) {
                    return Err(Error::Validation(format!(
                        "plausible value {} does not share the observation mask (subject `{}`, wave {})",
                        k + 1,
                        self.ids[i],
                        t + 1
                    )));
                }
                if a.iter().any(|v| v.is_infinite()) {
                    return Err(Error::Validation(format!(
                        "plausible value {} has a non-finite value",
                        k + 1
                    )));
                }
            }
        }
        self.plausible_values = pvs;
        Ok(self)
    }

    /// Attaches externally supplied propensity scores for wave `wave`.
    pub fn with_propensity(mut self, wave: usize, scores: Vec<f64>) -> Result<Self> {
        if wave < 2 || wave > self.n_waves() {
            return Err(Error::Validation(format!("no treatment at wave {wave}")));
        }
        if scores.len() != self.n_subjects() {
            return Err(Error::Validation("propensity scores have wrong length".into()));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_nan() && !(**s > 0.0 && **s < 1.0)) {
            return Err(Error::Validation(format!(
                "supplied propensity score {s} for wave {wave} is outside (0, 1)"
            )));
        }
        self.propensity[wave - 2] = Some(scores);
        Ok(self)
    }

    pub fn with_encoding(mut self, encoding: Encoding) -> Self {
        self.encoding = encoding;
        self
    }

    pub(crate) fn push_warning(&mut self, w: String) {
        log::warn!("{w}");
        self.warnings.push(w);
    }

    pub fn n_subjects(&self) -> usize {
        self.ids.len()
    }

    pub fn n_waves(&self) -> usize {
        self.outcomes.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Outcomes at wave `t` (1-based).
    pub fn outcome(&self, t: usize) -> &[f64] {
        &self.outcomes[t - 1]
    }

    pub fn outcomes(&self) -> &[Vec<f64>] {
        &self.outcomes
    }

    /// Treatment indicators at wave `w >= 2`.
    pub fn treatment(&self, w: usize) -> &[Option<bool>] {
        &self.treatments[w - 2]
    }

    pub fn treatments(&self) -> &[Vec<Option<bool>>] {
        &self.treatments
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }

    pub fn covariate(&self, label: &str) -> Option<&Covariate> {
        self.covariates.iter().find(|c| c.label == label)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn plausible_values(&self) -> &[Vec<Vec<f64>>] {
        &self.plausible_values
    }

    pub fn supplied_propensity(&self, w: usize) -> Option<&[f64]> {
        self.propensity.get(w.wrapping_sub(2))?.as_deref()
    }

    pub fn encoding(&self) -> &Encoding {
        &self.encoding
    }

    /// 1-based index of the plausible value this view was built from.
    pub fn replicate(&self) -> Option<usize> {
        self.replicate
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn is_observed(&self, i: usize, t: usize) -> bool {
        !self.outcomes[t - 1][i].is_nan()
    }

    /// Last wave with an observed outcome, 0 if none.
    pub fn last_observed_wave(&self, i: usize) -> usize {
        (1..=self.n_waves())
            .take_while(|&t| self.is_observed(i, t))
            .last()
            .unwrap_or(0)
    }

    /// Number of subjects observed at wave `t`.
    pub fn n_observed(&self, t: usize) -> usize {
        self.outcome(t).iter().filter(|v| !v.is_nan()).count()
    }

    /// Copy with outcomes replaced; the observation mask must not change.
    pub fn with_outcomes(&self, outcomes: Vec<Vec<f64>>) -> Result<Self> {
        let mut out = self.clone();
        out.plausible_values.clear();
        out = out.with_plausible_values(vec![outcomes])?;
        out.outcomes = out.plausible_values.pop().expect("just set");
        Ok(out)
    }
}

fn check_monotone(ids: &[String], outcomes: &[Vec<f64>]) -> Result<()> {
    let n = ids.len();
    let offenders: Vec<&str> = (0..n)
        .filter(|&i| {
            (1..outcomes.len()).any(|t| !outcomes[t][i].is_nan() && outcomes[t - 1][i].is_nan())
        })
        .map(|i| ids[i].as_str())
        .collect();
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "non-monotone dropout (outcome observed after a missing wave) for subjects: {}",
            offenders.join(", ")
        )))
    }
}

/// Affine map between the original outcome scale and the standardized one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub sd: f64,
}

impl Standardizer {
    /// Pooled mean and sample standard deviation of every observed value.
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<Self> {
        let obs: Vec<f64> = values.into_iter().copied().filter(|v| !v.is_nan()).collect();
        if obs.len() < 2 {
            return Err(Error::Validation(
                "standardization needs at least two observed outcomes".into(),
            ));
        }
        let n = obs.len() as f64;
        let mean = obs.iter().sum::<f64>() / n;
        let var = obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt();
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(Error::Validation(
                "outcome has zero variance; nothing to model".into(),
            ));
        }
        Ok(Standardizer { mean, sd })
    }

    #[inline]
    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.mean) / self.sd
    }

    /// Back to the outcome scale for levels such as `mu` or `y-hat`.
    #[inline]
    pub fn destandardize(&self, z: f64) -> f64 {
        self.mean + self.sd * z
    }

    /// Back to the outcome scale for differences such as `delta` or `tau`.
    #[inline]
    pub fn rescale(&self, effect: f64) -> f64 {
        self.sd * effect
    }
}

/// Standardizes all observed outcomes with their pooled mean and SD.
pub fn standardize_outcomes(data: &PanelDataset) -> Result<(PanelDataset, Standardizer)> {
    let s = Standardizer::fit(data.outcomes.iter().flatten())?;
    let mut out = data.clone();
    for y in out.outcomes.iter_mut() {
        for v in y.iter_mut() {
            *v = s.standardize(*v);
        }
    }
    out.plausible_values.clear();
    Ok((out, s))
}

/// One single-outcome dataset per plausible value.
pub fn plausible_value_views(data: &PanelDataset) -> Result<Vec<PanelDataset>> {
    if data.plausible_values.is_empty() {
        return Err(Error::Validation("dataset has no plausible values".into()));
    }
    // Re-validate: replicates must share the mask with the base outcomes.
    data.clone()
        .with_plausible_values(data.plausible_values.clone())?;
    Ok(data
        .plausible_values
        .iter()
        .enumerate()
        .map(|(k, pv)| {
            let mut view = data.clone();
            view.outcomes = pv.clone();
            view.plausible_values.clear();
            view.replicate = Some(k + 1);
            view
        })
        .collect())
}
