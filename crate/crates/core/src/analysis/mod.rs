//! Posterior summaries of a fitted model: weighted average treatment effects
//! per wave, per-subject effect intervals, split-count variable importance,
//! and report exports.
//!
//! Intervals are central quantile intervals (type-7 quantiles, the linear
//! interpolation used by R's default `quantile`).

mod export;

pub use export::{
    build_report, write_ate_csv, write_effects_csv, write_histogram, write_report, AteReport,
    DeltaSpreadReport, Report,
};
pub use crate::model::pool_chains;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PosteriorDraws, Prediction};
use crate::tree::ForestKind;

/// Posterior mean and central credible interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Type-7 quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean and central `level` interval of a sample. The interval is widened to
/// include the mean when a very skewed sample puts the mean outside it.
pub fn interval(values: &[f64], level: f64) -> Interval {
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    interval_sorted(&sorted, values.iter().sum::<f64>() / values.len() as f64, level)
}

fn interval_sorted(sorted: &[f64], mean: f64, level: f64) -> Interval {
    let tail = (1.0 - level) / 2.0;
    Interval {
        mean,
        lo: quantile(sorted, tail).min(mean),
        hi: quantile(sorted, 1.0 - tail).max(mean),
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("credible level must be in (0, 1), got {level}")))
    }
}

/// `sum_i w_i tau_i / sum_i w_i` over the rows where `include` holds.
pub fn weighted_mean(values: &[f64], weights: &[f64], include: impl Fn(usize) -> bool) -> f64 {
    let (num, den) = values
        .iter()
        .zip(weights)
        .enumerate()
        .filter(|(i, _)| include(*i))
        .fold((0.0, 0.0), |(n, d), (_, (v, w))| (n + w * v, d + w));
    num / den
}

fn check_weights(weights: &[f64], n: usize, include: impl Fn(usize) -> bool) -> Result<()> {
    if weights.len() != n {
        return Err(Error::Validation(format!("{} weights for {n} subjects", weights.len())));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::Validation(format!("weights must be finite and non-negative, got {w}")));
    }
    let total: f64 = (0..n).filter(|&i| include(i)).map(|i| weights[i]).sum();
    if total <= 0.0 {
        return Err(Error::Validation("weights of the included subjects sum to zero".into()));
    }
    Ok(())
}

fn check_wave(wave: usize, n_waves: usize) -> Result<()> {
    if (2..=n_waves).contains(&wave) {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "wave {wave} has no treatment effect (model waves are 2..={n_waves})"
        )))
    }
}

/// Posterior sample of the weighted average treatment effect at `wave`,
/// one value per pooled draw, over the training subjects still observed at
/// that wave. `weights` defaults to the survey weights stored with the draws.
pub fn ate_posterior(draws: &PosteriorDraws, weights: Option<&[f64]>, wave: usize) -> Result<Vec<f64>> {
    check_wave(wave, draws.n_waves())?;
    let subjects = &draws.meta.subjects;
    let weights = weights.unwrap_or(&subjects.weights);
    let present = |i: usize| subjects.present(i, wave);
    check_weights(weights, subjects.len(), present)?;
    Ok(draws
        .draws
        .iter()
        .map(|d| weighted_mean(d.tau(wave), weights, present))
        .collect())
}

/// Per-subject summaries for one wave.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveEffects {
    pub wave: usize,
    /// Whether the subject's outcome is observed at this wave.
    pub present: Vec<bool>,
    pub tau: Vec<Interval>,
    pub delta: Vec<Interval>,
    /// Weighted average effect over present subjects, one value per draw.
    pub ate: Vec<f64>,
    pub ate_interval: Interval,
}

impl WaveEffects {
    pub fn tau_means(&self) -> Vec<f64> {
        self.tau.iter().map(|v| v.mean).collect()
    }

    pub fn delta_means(&self) -> Vec<f64> {
        self.delta.iter().map(|v| v.mean).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSummary {
    pub level: f64,
    pub ids: Vec<String>,
    pub weights: Vec<f64>,
    pub waves: Vec<WaveEffects>,
}

impl EffectSummary {
    pub fn wave(&self, wave: usize) -> Result<&WaveEffects> {
        self.waves
            .iter()
            .find(|w| w.wave == wave)
            .ok_or_else(|| Error::Validation(format!("no summary for wave {wave}")))
    }

    pub fn n_draws(&self) -> usize {
        self.waves.first().map_or(0, |w| w.ate.len())
    }
}

/// `draws[d][w - 2][i]` for delta and tau, across all draws.
struct Components<'a> {
    delta: Vec<&'a [Vec<f64>]>,
    tau: Vec<&'a [Vec<f64>]>,
}

fn summarize_components(
    ids: &[String],
    weights: &[f64],
    n_waves: usize,
    present: impl Fn(usize, usize) -> bool,
    parts: Components<'_>,
    level: f64,
) -> Result<EffectSummary> {
    check_level(level)?;
    let n_draws = parts.tau.len();
    if n_draws < 2 {
        return Err(Error::Validation(format!(
            "at least 2 draws are needed for intervals, got {n_draws}"
        )));
    }
    let n = ids.len();
    let mut waves = Vec::with_capacity(n_waves.saturating_sub(1));
    let mut buf = vec![0.0; n_draws];
    for w in 2..=n_waves {
        let mask: Vec<bool> = (0..n).map(|i| present(i, w)).collect();
        check_weights(weights, n, |i| mask[i])?;
        let mut per_subject = |src: &[&[Vec<f64>]]| -> Vec<Interval> {
            (0..n)
                .map(|i| {
                    for (b, d) in buf.iter_mut().zip(src) {
                        *b = d[w - 2][i];
                    }
                    let mean = buf.iter().sum::<f64>() / n_draws as f64;
                    buf.sort_unstable_by(f64::total_cmp);
                    interval_sorted(&buf, mean, level)
                })
                .collect()
        };
        let tau = per_subject(&parts.tau);
        let delta = per_subject(&parts.delta);
        let ate: Vec<f64> = parts
            .tau
            .iter()
            .map(|d| weighted_mean(&d[w - 2], weights, |i| mask[i]))
            .collect();
        let ate_interval = interval(&ate, level);
        waves.push(WaveEffects {
            wave: w,
            present: mask,
            tau,
            delta,
            ate,
            ate_interval,
        });
    }
    Ok(EffectSummary {
        level,
        ids: ids.to_vec(),
        weights: weights.to_vec(),
        waves,
    })
}

/// Posterior means and central `level` intervals of every training
/// subject's `tau_w` and `delta_w`, plus the weighted ATE sample per wave.
pub fn summarize_effects(draws: &PosteriorDraws, level: f64) -> Result<EffectSummary> {
    let s = &draws.meta.subjects;
    summarize_components(
        &s.ids,
        &s.weights,
        draws.n_waves(),
        |i, w| s.present(i, w),
        Components {
            delta: draws.draws.iter().map(|d| d.delta.as_slice()).collect(),
            tau: draws.draws.iter().map(|d| d.tau.as_slice()).collect(),
        },
        level,
    )
}

/// Same summaries for predictions on new rows. Every row counts as present;
/// `weights` defaults to equal weights.
pub fn summarize_prediction(
    prediction: &Prediction,
    weights: Option<&[f64]>,
    level: f64,
) -> Result<EffectSummary> {
    let n = prediction.ids.len();
    let ones = vec![1.0; n];
    let n_waves = prediction.draws.first().map_or(1, |d| d.tau.len() + 1);
    summarize_components(
        &prediction.ids,
        weights.unwrap_or(&ones),
        n_waves,
        |_, _| true,
        Components {
            delta: prediction.draws.iter().map(|d| d.delta.as_slice()).collect(),
            tau: prediction.draws.iter().map(|d| d.tau.as_slice()).collect(),
        },
        level,
    )
}

/// Posterior mean number of splits on a feature group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub name: String,
    pub splits: f64,
}

/// Average over draws of the number of internal nodes splitting on each
/// feature of forest `kind`. One-hot columns are added into their parent
/// categorical. Features keep their design order.
pub fn variable_importance(draws: &PosteriorDraws, kind: ForestKind) -> Result<Vec<Importance>> {
    let unknown = || Error::UnknownForest(kind.to_string());
    if !matches!(kind, ForestKind::Mu | ForestKind::Delta(_) | ForestKind::Tau(_)) {
        return Err(unknown());
    }
    let schema = draws.meta.schema.forest(kind).map_err(|_| unknown())?;
    let p = schema.columns.len();
    let mut totals = vec![0.0; p];
    for d in &draws.draws {
        let forest = d
            .forest(kind)
            .ok_or_else(|| Error::Structure(format!("draw has no {kind} forest")))?;
        for (t, c) in totals.iter_mut().zip(forest.split_counts(p)) {
            *t += c as f64;
        }
    }
    let n = draws.len().max(1) as f64;
    let mut out: Vec<Importance> = Vec::new();
    for (col, total) in schema.columns.iter().zip(totals) {
        let name = col.group();
        match out.iter_mut().find(|v| v.name == name) {
            Some(v) => v.splits += total / n,
            None => out.push(Importance {
                name: name.to_string(),
                splits: total / n,
            }),
        }
    }
    Ok(out)
}

/// Spread of the posterior-mean growth values `delta_i` across subjects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaSpread {
    pub weighted: f64,
    pub unweighted: f64,
}

/// Weighted and unweighted population SD of the posterior-mean `delta_i`
/// at `wave`, over present subjects.
pub fn delta_spread(summary: &EffectSummary, wave: usize) -> Result<DeltaSpread> {
    let w = summary.wave(wave)?;
    let means = w.delta_means();
    let include = |i: usize| w.present[i];
    let sd = |weights: &[f64]| {
        let m = weighted_mean(&means, weights, include);
        let sq: Vec<f64> = means.iter().map(|v| (v - m).powi(2)).collect();
        weighted_mean(&sq, weights, include).sqrt()
    };
    Ok(DeltaSpread {
        weighted: sd(&summary.weights),
        unweighted: sd(&vec![1.0; means.len()]),
    })
}

#[cfg(test)]
mod tests;
