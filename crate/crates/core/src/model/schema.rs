use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Encoding, PanelDataset};
use crate::error::{Error, Result};
use crate::tree::{Design, ForestKind};

/// Where a design column's values come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ColumnSource {
    Covariate {
        label: String,
        parent: Option<String>,
    },
    /// Raw outcome at an earlier wave.
    Outcome { wave: usize },
    /// Observed treatment indicator, NaN when missing.
    Treatment { wave: usize },
    /// Propensity score for the forest's wave.
    Propensity { wave: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub source: ColumnSource,
}

impl ColumnSpec {
    /// Name used when reporting importance: one-hot columns report their parent.
    pub fn group(&self) -> &str {
        match &self.source {
            ColumnSource::Covariate {
                parent: Some(p), ..
            } => p,
            _ => &self.name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestSchema {
    #[serde(with = "kind_str")]
    pub kind: ForestKind,
    pub columns: Vec<ColumnSpec>,
}

/// Column layout of every forest's design matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSchema {
    pub n_waves: usize,
    pub forests: Vec<ForestSchema>,
    pub encoding: Encoding,
}

impl ModelSchema {
    /// The layout used by the model fit to `data`.
    ///
    /// - `mu`: covariates available at wave 1.
    /// - `delta.w`: covariates available by wave `w`, outcomes `y.1..y.(w-1)`,
    ///   treatments `z.2..z.(w-1)` and the propensity `pi.w`.
    /// - `tau.w`: as `delta.w` without the propensity.
    /// - `propensity.w`: as `tau.w`.
    pub fn for_data(data: &PanelDataset) -> Result<Self> {
        let t = data.n_waves();
        if t < 2 {
            return Err(Error::Validation(
                "at least two waves are needed to model growth".into(),
            ));
        }
        let mut forests = vec![ForestSchema {
            kind: ForestKind::Mu,
            columns: history(data, 1, true, false, None),
        }];
        for w in 2..=t {
            forests.push(ForestSchema {
                kind: ForestKind::Delta(w),
                columns: history(data, w, true, false, Some(w)),
            });
            forests.push(ForestSchema {
                kind: ForestKind::Tau(w),
                columns: history(data, w, true, false, None),
            });
        }
        for w in 2..=t {
            forests.push(ForestSchema {
                kind: ForestKind::Propensity(w),
                columns: history(data, w, true, false, None),
            });
        }
        Ok(ModelSchema {
            n_waves: t,
            forests,
            encoding: data.encoding().clone(),
        })
    }

    /// Layout for a single forest on the differenced outcome `y.w - y.(w-1)`:
    /// covariates available by wave `w` and treatments `z.2..z.w`, without
    /// the outcome history.
    pub fn for_difference(data: &PanelDataset, w: usize) -> Result<Self> {
        if w < 2 || w > data.n_waves() {
            return Err(Error::Validation(format!("wave {w} out of range")));
        }
        Ok(ModelSchema {
            n_waves: data.n_waves(),
            forests: vec![ForestSchema {
                kind: ForestKind::Difference(w),
                columns: history(data, w, false, true, None),
            }],
            encoding: data.encoding().clone(),
        })
    }

    pub fn forest(&self, kind: ForestKind) -> Result<&ForestSchema> {
        self.forests
            .iter()
            .find(|f| f.kind == kind)
            .ok_or_else(|| Error::UnknownForest(kind.to_string()))
    }

    /// Builds the design matrix of forest `kind` from `data`. `propensity`
    /// supplies the `pi.w` column when the layout has one.
    pub fn design(
        &self,
        kind: ForestKind,
        data: &PanelDataset,
        propensity: Option<&[f64]>,
    ) -> Result<Design> {
        let fs = self.forest(kind)?;
        let n = data.n_subjects();
        let mut cols = Vec::with_capacity(fs.columns.len());
        for c in &fs.columns {
            let values = match &c.source {
                ColumnSource::Covariate { label, .. } => data
                    .covariate(label)
                    .ok_or_else(|| Error::Schema(format!("missing covariate column `{label}`")))?
                    .values
                    .clone(),
                ColumnSource::Outcome { wave } => {
                    if *wave > data.n_waves() {
                        return Err(Error::Schema(format!("missing outcome column `y.{wave}`")));
                    }
                    data.outcome(*wave).to_vec()
                }
                ColumnSource::Treatment { wave } => {
                    if *wave > data.n_waves() {
                        return Err(Error::Schema(format!("missing treatment column `z.{wave}`")));
                    }
                    data.treatment(*wave)
                        .iter()
                        .map(|z| z.map_or(f64::NAN, |b| b as u8 as f64))
                        .collect()
                }
                ColumnSource::Propensity { wave } => match propensity {
                    Some(p) if p.len() == n => p.to_vec(),
                    Some(p) => {
                        return Err(Error::Schema(format!(
                            "{} propensity scores for {n} rows",
                            p.len()
                        )))
                    }
                    None => {
                        return Err(Error::Schema(format!(
                            "no propensity scores for column `pi.{wave}`"
                        )))
                    }
                },
            };
            cols.push((c.name.clone(), values));
        }
        Ok(Design::new(n, cols))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn history(
    data: &PanelDataset,
    w: usize,
    outcomes: bool,
    current_treatment: bool,
    propensity: Option<usize>,
) -> Vec<ColumnSpec> {
    let mut cols: Vec<ColumnSpec> = data
        .covariates()
        .iter()
        .filter(|c| c.wave <= w)
        .map(|c| ColumnSpec {
            name: c.label.clone(),
            source: ColumnSource::Covariate {
                label: c.label.clone(),
                parent: c.parent.clone(),
            },
        })
        .collect();
    if outcomes {
        cols.extend((1..w).map(|t| ColumnSpec {
            name: format!("y.{t}"),
            source: ColumnSource::Outcome { wave: t },
        }));
    }
    let last_z = if current_treatment { w } else { w - 1 };
    cols.extend((2..=last_z).map(|t| ColumnSpec {
        name: format!("z.{t}"),
        source: ColumnSource::Treatment { wave: t },
    }));
    if let Some(w) = propensity {
        cols.push(ColumnSpec {
            name: format!("pi.{w}"),
            source: ColumnSource::Propensity { wave: w },
        });
    }
    cols
}

pub(crate) mod kind_str {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::tree::ForestKind;

    pub fn serialize<S: Serializer>(k: &ForestKind, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(k)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ForestKind, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
