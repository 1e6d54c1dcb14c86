//! Per-wave treatment propensity `P(Z_w = 1 | history)`.
//!
//! The scores enter the growth forests as an extra covariate and serve as
//! the prior probability when a missing treatment indicator is imputed.
//! Every estimator returns a [`PropensityModel`] as well as the in-sample
//! scores, so the same fitted model can score new rows at prediction time.

mod logistic;
mod probit;

pub use logistic::{expit, LogisticModel};
pub use probit::{truncated_normal, ProbitConfig, ProbitForestModel};

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::Design;

/// Scores are clipped to `[CLIP_LO, CLIP_HI]`.
pub const CLIP_LO: f64 = 0.001;
pub const CLIP_HI: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityMethod {
    Logistic,
    ProbitForest,
    Supplied,
}

impl std::fmt::Display for PropensityMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PropensityMethod::Logistic => "logistic",
            PropensityMethod::ProbitForest => "probit_forest",
            PropensityMethod::Supplied => "supplied",
        })
    }
}

impl std::str::FromStr for PropensityMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(PropensityMethod::Logistic),
            "probit_forest" | "probit-forest" => Ok(PropensityMethod::ProbitForest),
            "supplied" => Ok(PropensityMethod::Supplied),
            _ => Err(Error::Validation(format!(
                "unknown propensity method `{s}` (expected logistic, probit_forest or supplied)"
            ))),
        }
    }
}

/// Scores for one wave, one per subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityEstimate {
    pub wave: usize,
    pub scores: Vec<f64>,
    pub method: PropensityMethod,
}

/// A fitted propensity model that can score new rows of the same design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum PropensityModel {
    /// Scores came from outside; new rows must carry their own.
    Supplied,
    Logistic(LogisticModel),
    ProbitForest(ProbitForestModel),
}

impl PropensityModel {
    pub fn method(&self) -> PropensityMethod {
        match self {
            PropensityModel::Supplied => PropensityMethod::Supplied,
            PropensityModel::Logistic(_) => PropensityMethod::Logistic,
            PropensityModel::ProbitForest(_) => PropensityMethod::ProbitForest,
        }
    }

    /// Clipped scores for every row of `design`.
    pub fn score(&self, design: &Design) -> Result<Vec<f64>> {
        let raw = match self {
            PropensityModel::Supplied => {
                return Err(Error::Schema(
                    "propensity scores were supplied at fit time; new data must provide them"
                        .into(),
                ))
            }
            PropensityModel::Logistic(m) => m.score(design)?,
            PropensityModel::ProbitForest(m) => m.score(design)?,
        };
        Ok(raw.into_iter().map(clip).collect())
    }
}

#[inline]
pub fn clip(p: f64) -> f64 {
    p.clamp(CLIP_LO, CLIP_HI)
}

/// Fails unless the observed indicators contain both a 0 and a 1.
pub fn check_overlap(wave: usize, z: &[Option<bool>]) -> Result<()> {
    let treated = z.iter().filter(|v| **v == Some(true)).count();
    let control = z.iter().filter(|v| **v == Some(false)).count();
    if treated == 0 || control == 0 {
        return Err(Error::Overlap {
            wave,
            detail: format!("{treated} treated and {control} untreated subjects observed"),
        });
    }
    Ok(())
}

/// Fits `method` to the observed indicators of one wave and scores every row
/// of `design`. Rows whose indicator is missing are scored but do not enter
/// the fit.
pub fn estimate_propensity<R: Rng + ?Sized>(
    wave: usize,
    design: &Design,
    z: &[Option<bool>],
    method: PropensityMethod,
    probit: &ProbitConfig,
    rng: &mut R,
) -> Result<(PropensityEstimate, PropensityModel)> {
    if z.len() != design.n_rows() {
        return Err(Error::Validation(format!(
            "{} treatment indicators for {} design rows",
            z.len(),
            design.n_rows()
        )));
    }
    check_overlap(wave, z)?;
    let model = match method {
        PropensityMethod::Logistic => PropensityModel::Logistic(LogisticModel::fit(design, z)?),
        PropensityMethod::ProbitForest => {
            PropensityModel::ProbitForest(ProbitForestModel::fit(wave, design, z, probit, rng)?)
        }
        PropensityMethod::Supplied => {
            return Err(Error::Validation(
                "supplied propensity scores must be passed to `supplied`".into(),
            ))
        }
    };
    let scores = model.score(design)?;
    Ok((
        PropensityEstimate {
            wave,
            scores,
            method,
        },
        model,
    ))
}

/// Validates externally supplied scores and clips them.
pub fn supplied(wave: usize, scores: &[f64]) -> Result<PropensityEstimate> {
    if let Some((i, p)) = scores
        .iter()
        .enumerate()
        .find(|(_, p)| !(**p > 0.0 && **p < 1.0))
    {
        return Err(Error::Validation(format!(
            "supplied propensity for wave {wave}, row {}: {p} is not in (0, 1)",
            i + 1
        )));
    }
    Ok(PropensityEstimate {
        wave,
        scores: scores.iter().copied().map(clip).collect(),
        method: PropensityMethod::Supplied,
    })
}

/// Writes `subject_id,score` rows, preceded by `# ` comment lines.
pub fn write_scores_csv<W: Write>(
    mut out: W,
    ids: &[String],
    estimate: &PropensityEstimate,
    comment: Option<&str>,
) -> Result<()> {
    if ids.len() != estimate.scores.len() {
        return Err(Error::Validation("one id per score required".into()));
    }
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["subject_id", "score"])?;
    for (id, p) in ids.iter().zip(&estimate.scores) {
        w.write_record([id.as_str(), &p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
