use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::draws::PosteriorDraws;
use crate::data::PanelDataset;
use crate::error::{Error, Result};
use crate::propensity::{supplied, PropensityModel};
use crate::tree::{Design, ForestKind};

/// Components of one posterior draw evaluated on new rows, on the original
/// outcome scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDraw {
    pub chain: usize,
    pub mu: Vec<f64>,
    /// `delta[w - 2][i]`.
    pub delta: Vec<Vec<f64>>,
    /// `tau[w - 2][i]`.
    pub tau: Vec<Vec<f64>>,
    /// `y_hat[t - 1][i]`; NaN from the first wave whose treatment is missing.
    pub y_hat: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub ids: Vec<String>,
    pub draws: Vec<PredictionDraw>,
}

/// Evaluates every saved draw on `newdata`.
///
/// Propensity columns are scored with each chain's fitted propensity model;
/// when scores were supplied at fit time, `newdata` must carry `pi.<w>`.
pub fn predict(draws: &PosteriorDraws, newdata: &PanelDataset) -> Result<Prediction> {
    let schema = &draws.meta.schema;
    let t = schema.n_waves;
    if newdata.n_waves() < t {
        return Err(Error::Schema(format!(
            "model has {t} waves, new data has {}",
            newdata.n_waves()
        )));
    }

    // designs depend on the chain only through the propensity column
    let mut designs: BTreeMap<usize, Vec<(ForestKind, Design)>> = BTreeMap::new();
    for c in &draws.meta.chains {
        let mut ds = vec![(ForestKind::Mu, schema.design(ForestKind::Mu, newdata, None)?)];
        for w in 2..=t {
            let wp = c
                .propensity
                .iter()
                .find(|p| p.wave == w)
                .ok_or_else(|| Error::Validation(format!("no propensity model for wave {w}")))?;
            let scores = match &wp.model {
                PropensityModel::Supplied => {
                    let s = newdata.supplied_propensity(w).ok_or_else(|| {
                        Error::Schema(format!(
                            "model was fit with supplied propensity scores; new data needs `pi.{w}`"
                        ))
                    })?;
                    supplied(w, s)?.scores
                }
                model => model.score(&schema.design(ForestKind::Propensity(w), newdata, None)?)?,
            };
            ds.push((
                ForestKind::Delta(w),
                schema.design(ForestKind::Delta(w), newdata, Some(&scores))?,
            ));
            ds.push((ForestKind::Tau(w), schema.design(ForestKind::Tau(w), newdata, None)?));
        }
        designs.insert(c.chain, ds);
    }

    let n = newdata.n_subjects();
    let mut out = Vec::with_capacity(draws.len());
    for d in &draws.draws {
        let st = draws.meta.chain(d.chain)?.standardizer;
        let ds = &designs[&d.chain];
        let mut mu = Vec::new();
        let mut delta = vec![Vec::new(); t - 1];
        let mut tau = vec![Vec::new(); t - 1];
        for (kind, design) in ds {
            let forest = d
                .forest(*kind)
                .ok_or_else(|| Error::Structure(format!("draw has no {kind} forest")))?;
            forest.check_design(design)?;
            let g = forest.predict(design);
            match kind {
                ForestKind::Mu => mu = g.into_iter().map(|v| st.destandardize(v)).collect(),
                ForestKind::Delta(w) => delta[w - 2] = g.into_iter().map(|v| st.rescale(v)).collect(),
                ForestKind::Tau(w) => tau[w - 2] = g.into_iter().map(|v| st.rescale(v)).collect(),
                _ => unreachable!("model designs hold mu, delta and tau only"),
            }
        }
        let mut y_hat = vec![mu.clone()];
        for w in 2..=t {
            let z = newdata.treatment(w);
            let next: Vec<f64> = (0..n)
                .map(|i| {
                    let zi = z[i].map_or(f64::NAN, |b| b as u8 as f64);
                    y_hat[w - 2][i] + delta[w - 2][i] + tau[w - 2][i] * zi
                })
                .collect();
            y_hat.push(next);
        }
        out.push(PredictionDraw {
            chain: d.chain,
            mu,
            delta,
            tau,
            y_hat,
        });
    }
    Ok(Prediction {
        ids: newdata.ids().to_vec(),
        draws: out,
    })
}
