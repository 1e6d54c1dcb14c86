use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{delta_spread, variable_importance, EffectSummary, Importance, Interval};
use crate::error::{Error, Result};
use crate::model::PosteriorDraws;
use crate::tree::ForestKind;

fn write_comment<W: Write>(out: &mut W, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    Ok(())
}

/// One row per subject and wave:
/// `subject_id,wave,present,tau_mean,tau_lo,tau_hi,delta_mean,delta_lo,delta_hi`.
pub fn write_effects_csv<W: Write>(mut out: W, summary: &EffectSummary, comment: Option<&str>) -> Result<()> {
    write_comment(&mut out, comment)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "subject_id", "wave", "present", "tau_mean", "tau_lo", "tau_hi", "delta_mean", "delta_lo",
        "delta_hi",
    ])?;
    for we in &summary.waves {
        for (i, id) in summary.ids.iter().enumerate() {
            let (t, d) = (we.tau[i], we.delta[i]);
            w.write_record([
                id.clone(),
                we.wave.to_string(),
                (we.present[i] as u8).to_string(),
                t.mean.to_string(),
                t.lo.to_string(),
                t.hi.to_string(),
                d.mean.to_string(),
                d.lo.to_string(),
                d.hi.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// The weighted ATE sample: `draw,ate.2,...,ate.T`.
pub fn write_ate_csv<W: Write>(mut out: W, summary: &EffectSummary, comment: Option<&str>) -> Result<()> {
    write_comment(&mut out, comment)?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["draw".to_string()];
    header.extend(summary.waves.iter().map(|we| format!("ate.{}", we.wave)));
    w.write_record(&header)?;
    for d in 0..summary.n_draws() {
        let mut row = vec![d.to_string()];
        row.extend(summary.waves.iter().map(|we| we.ate[d].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Equal-width histogram as whitespace-separated `center count` lines, ready
/// for gnuplot's `with boxes`.
pub fn write_histogram<W: Write>(mut out: W, values: &[f64], bins: usize, comment: Option<&str>) -> Result<()> {
    if bins == 0 {
        return Err(Error::Validation("histogram needs at least one bin".into()));
    }
    write_comment(&mut out, comment)?;
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Ok(());
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in finite {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    writeln!(out, "# center count")?;
    for (k, c) in counts.iter().enumerate() {
        writeln!(out, "{} {}", lo + (k as f64 + 0.5) * width, c)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub wave: usize,
    #[serde(flatten)]
    pub interval: Interval,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSpreadReport {
    pub wave: usize,
    pub weighted_sd: f64,
    pub unweighted_sd: f64,
}

/// JSON summary of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub package_version: String,
    pub config: serde_json::Value,
    pub level: f64,
    pub n_draws: usize,
    pub n_chains: usize,
    pub ate: Vec<AteReport>,
    pub delta_spread: Vec<DeltaSpreadReport>,
    /// Split counts per forest, keyed by forest name.
    pub importance: BTreeMap<String, Vec<Importance>>,
}

pub fn build_report(draws: &PosteriorDraws, summary: &EffectSummary, config: serde_json::Value) -> Result<Report> {
    let mut ate = Vec::new();
    let mut spread = Vec::new();
    for we in &summary.waves {
        let n = we.ate.len() as f64;
        let m = we.ate_interval.mean;
        let var = we.ate.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        ate.push(AteReport {
            wave: we.wave,
            interval: we.ate_interval,
            sd: var.sqrt(),
        });
        let s = delta_spread(summary, we.wave)?;
        spread.push(DeltaSpreadReport {
            wave: we.wave,
            weighted_sd: s.weighted,
            unweighted_sd: s.unweighted,
        });
    }
    let mut importance = BTreeMap::new();
    let model_forests = draws.meta.schema.forests.iter().filter(|f| {
        matches!(f.kind, ForestKind::Mu | ForestKind::Delta(_) | ForestKind::Tau(_))
    });
    for f in model_forests {
        importance.insert(f.kind.to_string(), variable_importance(draws, f.kind)?);
    }
    Ok(Report {
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        config,
        level: summary.level,
        n_draws: draws.len(),
        n_chains: draws.meta.chains.len(),
        ate,
        delta_spread: spread,
        importance,
    })
}

pub fn write_report<W: Write>(mut out: W, report: &Report) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, report)?;
    writeln!(out)?;
    Ok(())
}
