//! Wide-format CSV ingestion and export.
//!
//! One row per subject. Recognized headers:
//!
//! | header            | meaning                                        |
//! |-------------------|------------------------------------------------|
//! | `id`              | subject identifier (optional)                  |
//! | `y.<t>`           | outcome at wave `t`                            |
//! | `z.<t>`           | treatment indicator for wave `t >= 2`          |
//! | `x.<name>.<t>`    | covariate first available at wave `t`          |
//! | `weight`          | sampling weight (optional, default 1)          |
//! | `pv.<k>.y.<t>`    | plausible value `k` of the wave-`t` outcome    |
//! | `pi.<t>`          | supplied propensity score for wave `t`         |
//!
//! Empty cells and `NA` are missing. Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Covariate, Encoding, PanelDataset};
use crate::error::{Error, Result};

/// Column typing overrides, usually read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaSpec {
    pub id_column: String,
    pub weight_column: String,
    /// Covariate headers (`x.<name>.<t>`) to treat as categorical even if
    /// every cell parses as a number.
    pub categorical: Vec<String>,
    /// Covariate headers that must parse as numbers.
    pub numeric: Vec<String>,
    /// Extra cell values to read as missing, on top of `""` and `NA`.
    pub missing_tokens: Vec<String>,
}

impl Default for SchemaSpec {
    fn default() -> Self {
        SchemaSpec {
            id_column: "id".into(),
            weight_column: "weight".into(),
            categorical: Vec::new(),
            numeric: Vec::new(),
            missing_tokens: Vec::new(),
        }
    }
}

impl SchemaSpec {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }

    fn is_missing(&self, cell: &str) -> bool {
        let c = cell.trim();
        c.is_empty() || c == "NA" || self.missing_tokens.iter().any(|m| m == c)
    }
}

enum Column {
    Id,
    Weight,
    Outcome(usize),
    Treatment(usize),
    Covariate { name: String, wave: usize },
    Plausible { k: usize, wave: usize },
    Propensity(usize),
}

fn parse_wave(s: &str) -> Option<usize> {
    s.parse::<usize>().ok().filter(|&t| t >= 1)
}

fn classify(header: &str, spec: &SchemaSpec) -> Result<Column> {
    let bad = || Error::Schema(format!("unrecognized column `{header}`"));
    if header == spec.id_column {
        return Ok(Column::Id);
    }
    if header == spec.weight_column {
        return Ok(Column::Weight);
    }
    if let Some(t) = header.strip_prefix("y.") {
        return parse_wave(t).map(Column::Outcome).ok_or_else(bad);
    }
    if let Some(t) = header.strip_prefix("z.") {
        let t = parse_wave(t).ok_or_else(bad)?;
        if t < 2 {
            return Err(Error::Schema(format!(
                "`{header}`: treatment indicators start at wave 2; encode earlier treatment as a covariate"
            )));
        }
        return Ok(Column::Treatment(t));
    }
    if let Some(t) = header.strip_prefix("pi.") {
        let t = parse_wave(t).ok_or_else(bad)?;
        return Ok(Column::Propensity(t));
    }
    if let Some(rest) = header.strip_prefix("x.") {
        let (name, t) = rest.rsplit_once('.').ok_or_else(bad)?;
        let wave = parse_wave(t).ok_or_else(bad)?;
        if name.is_empty() {
            return Err(bad());
        }
        return Ok(Column::Covariate {
            name: name.to_string(),
            wave,
        });
    }
    if let Some(rest) = header.strip_prefix("pv.") {
        let (k, t) = rest.split_once(".y.").ok_or_else(bad)?;
        return Ok(Column::Plausible {
            k: parse_wave(k).ok_or_else(bad)?,
            wave: parse_wave(t).ok_or_else(bad)?,
        });
    }
    Err(bad())
}

/// Reads a wide-format CSV, inferring categorical columns.
pub fn load_csv(path: impl AsRef<Path>, spec: &SchemaSpec) -> Result<PanelDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, spec, None)
}

/// Reads a CSV using the level maps of a previously loaded dataset, so
/// one-hot columns line up with a trained model. Unseen levels encode as
/// all zeros and are reported through [`PanelDataset::warnings`].
pub fn load_csv_with_encoding(
    path: impl AsRef<Path>,
    spec: &SchemaSpec,
    encoding: &Encoding,
) -> Result<PanelDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, spec, Some(encoding))
}

/// Reads wide-format CSV text from any reader, inferring categorical columns.
pub fn read_csv_from<R: Read>(reader: R, spec: &SchemaSpec) -> Result<PanelDataset> {
    read_csv(reader, spec, None)
}

pub(crate) fn read_csv<R: Read>(
    reader: R,
    spec: &SchemaSpec,
    encoding: Option<&Encoding>,
) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let columns = headers
        .iter()
        .map(|h| classify(h, spec))
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<csv::StringRecord> = Vec::new();
    for rec in rdr.records() {
        rows.push(rec?);
    }
    let n = rows.len();
    let cell = |r: usize, c: usize| rows[r].get(c).unwrap_or("");
    // 1-based data row number plus the header line
    let line = |r: usize| r + 2;

    let parse_num = |r: usize, c: usize| -> Result<f64> {
        let s = cell(r, c);
        if spec.is_missing(s) {
            return Ok(f64::NAN);
        }
        let v: f64 = s.parse().map_err(|_| Error::Parse {
            row: line(r),
            column: headers[c].clone(),
            message: format!("`{s}` is not a number"),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                row: line(r),
                column: headers[c].clone(),
                message: format!("`{s}` is not finite"),
            });
        }
        Ok(v)
    };

    let mut ids: Option<Vec<String>> = None;
    let mut weights: Option<Vec<f64>> = None;
    let mut outcomes: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut treatments: BTreeMap<usize, Vec<Option<bool>>> = BTreeMap::new();
    let mut pvs: BTreeMap<usize, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    let mut propensity: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut covariates: Vec<Covariate> = Vec::new();
    let mut categorical_levels = BTreeMap::new();
    let mut warnings = Vec::new();

    for (c, col) in columns.iter().enumerate() {
        match col {
            Column::Id => {
                let v: Vec<String> = (0..n).map(|r| cell(r, c).to_string()).collect();
                if let Some(r) = v.iter().position(|s| s.is_empty()) {
                    return Err(Error::Parse {
                        row: line(r),
                        column: headers[c].clone(),
                        message: "empty subject id".into(),
                    });
                }
                ids = Some(v);
            }
            Column::Weight => {
                let v = (0..n).map(|r| parse_num(r, c)).collect::<Result<Vec<_>>>()?;
                if let Some(r) = v.iter().position(|w| w.is_nan()) {
                    return Err(Error::Parse {
                        row: line(r),
                        column: headers[c].clone(),
                        message: "missing weight".into(),
                    });
                }
                weights = Some(v);
            }
            Column::Outcome(t) => {
                let v = (0..n).map(|r| parse_num(r, c)).collect::<Result<Vec<_>>>()?;
                if outcomes.insert(*t, v).is_some() {
                    return Err(Error::Schema(format!("duplicate column `{}`", headers[c])));
                }
            }
            Column::Treatment(t) => {
                let v = (0..n)
                    .map(|r| {
                        let s = cell(r, c);
                        if spec.is_missing(s) {
                            return Ok(None);
                        }
                        match s.parse::<f64>() {
                            Ok(0.0) => Ok(Some(false)),
                            Ok(1.0) => Ok(Some(true)),
                            _ => Err(Error::Parse {
                                row: line(r),
                                column: headers[c].clone(),
                                message: format!("treatment must be 0, 1 or NA, got `{s}`"),
                            }),
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                if treatments.insert(*t, v).is_some() {
                    return Err(Error::Schema(format!("duplicate column `{}`", headers[c])));
                }
            }
            Column::Propensity(t) => {
                let v = (0..n).map(|r| parse_num(r, c)).collect::<Result<Vec<_>>>()?;
                propensity.insert(*t, v);
            }
            Column::Plausible { k, wave } => {
                let v = (0..n).map(|r| parse_num(r, c)).collect::<Result<Vec<_>>>()?;
                pvs.entry(*k).or_default().insert(*wave, v);
            }
            Column::Covariate { name, wave } => {
                let header = &headers[c];
                let label = format!("{name}.{wave}");
                let known_levels = encoding.and_then(|e| e.categorical.get(&label));
                let declared = spec.categorical.iter().any(|h| h == header);
                let forced_numeric = spec.numeric.iter().any(|h| h == header);
                let raw: Vec<&str> = (0..n).map(|r| cell(r, c)).collect();
                let looks_numeric = raw
                    .iter()
                    .all(|s| spec.is_missing(s) || s.parse::<f64>().is_ok());
                let categorical = match encoding {
                    Some(_) => known_levels.is_some(),
                    None => declared || (!looks_numeric && !forced_numeric),
                };
                if !categorical {
                    let v = (0..n).map(|r| parse_num(r, c)).collect::<Result<Vec<_>>>()?;
                    covariates.push(Covariate {
                        label,
                        wave: *wave,
                        parent: None,
                        values: v,
                    });
                    continue;
                }
                let levels: Vec<String> = match known_levels {
                    Some(l) => l.clone(),
                    None => {
                        let mut l: Vec<String> = raw
                            .iter()
                            .filter(|s| !spec.is_missing(s))
                            .map(|s| s.to_string())
                            .collect();
                        l.sort();
                        l.dedup();
                        l
                    }
                };
                for (r, s) in raw.iter().enumerate() {
                    if !spec.is_missing(s) && !levels.iter().any(|l| l == s) {
                        warnings.push(format!(
                            "row {}: unseen level `{s}` in `{header}` encoded as all zeros",
                            line(r)
                        ));
                    }
                }
                for level in &levels {
                    let values = raw
                        .iter()
                        .map(|s| {
                            if spec.is_missing(s) {
                                f64::NAN
                            } else if *s == level {
                                1.0
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    covariates.push(Covariate {
                        label: format!("{label}={level}"),
                        wave: *wave,
                        parent: Some(label.clone()),
                        values,
                    });
                }
                categorical_levels.insert(label, levels);
            }
        }
    }

    // Waves come from the outcome columns, or from the first plausible value
    // when no base outcome is given.
    let outcomes: Vec<Vec<f64>> = if outcomes.is_empty() {
        let first = pvs.values().next().ok_or_else(|| {
            Error::Schema("no outcome columns (`y.<t>` or `pv.<k>.y.<t>`)".into())
        })?;
        contiguous(first, "pv.1.y")?
    } else {
        contiguous(&outcomes, "y")?
    };
    let n_waves = outcomes.len();
    let mut z = Vec::with_capacity(n_waves.saturating_sub(1));
    for t in 2..=n_waves {
        z.push(
            treatments
                .remove(&t)
                .ok_or_else(|| Error::Schema(format!("missing treatment column `z.{t}`")))?,
        );
    }
    if let Some(t) = treatments.keys().next() {
        return Err(Error::Schema(format!("`z.{t}` refers to a wave with no outcome")));
    }
    let ids = ids.unwrap_or_else(|| (1..=n).map(|i| i.to_string()).collect());
    let mut data = PanelDataset::new(ids, outcomes, z, covariates)?;
    if let Some(w) = weights {
        data = data.with_weights(w)?;
    }
    if !pvs.is_empty() {
        let ks: Vec<usize> = pvs.keys().copied().collect();
        if ks != (1..=ks.len()).collect::<Vec<_>>() {
            return Err(Error::Schema(format!(
                "plausible values must be numbered 1..m, got {ks:?}"
            )));
        }
        let sets = pvs
            .values()
            .enumerate()
            .map(|(k, m)| {
                let set = contiguous(m, &format!("pv.{}.y", k + 1))?;
                if set.len() != n_waves {
                    return Err(Error::Schema(format!(
                        "plausible value {} covers {} waves, expected {n_waves}",
                        k + 1,
                        set.len()
                    )));
                }
                Ok(set)
            })
            .collect::<Result<Vec<_>>>()?;
        data = data.with_plausible_values(sets)?;
    }
    for (t, scores) in propensity {
        data = data.with_propensity(t, scores)?;
    }
    let encoding = match encoding {
        Some(e) => e.clone(),
        None => Encoding {
            categorical: categorical_levels,
        },
    };
    data = data.with_encoding(encoding);
    for w in warnings {
        data.push_warning(w);
    }
    Ok(data)
}

fn contiguous(cols: &BTreeMap<usize, Vec<f64>>, prefix: &str) -> Result<Vec<Vec<f64>>> {
    let waves: Vec<usize> = cols.keys().copied().collect();
    if waves != (1..=waves.len()).collect::<Vec<_>>() {
        return Err(Error::Schema(format!(
            "`{prefix}.<t>` columns must cover waves 1..T without gaps, got {waves:?}"
        )));
    }
    Ok(cols.values().cloned().collect())
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        // Display prints the shortest string that parses back to `v`.
        v.to_string()
    }
}

impl PanelDataset {
    /// Writes the dataset in the wide CSV convention; categorical columns
    /// are written back as their level strings. Optional `comment` lines
    /// are prefixed with `#`.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            for line in c.lines() {
                writeln!(out, "# {line}")?;
            }
        }
        let mut w = csv::Writer::from_writer(out);
        let n = self.n_subjects();
        let mut header = vec!["id".to_string()];
        let mut cols: Vec<Vec<String>> = vec![self.ids().to_vec()];
        for t in 1..=self.n_waves() {
            header.push(format!("y.{t}"));
            cols.push(self.outcome(t).iter().map(|v| fmt_num(*v)).collect());
        }
        for t in 2..=self.n_waves() {
            header.push(format!("z.{t}"));
            cols.push(
                self.treatment(t)
                    .iter()
                    .map(|z| match z {
                        Some(true) => "1".into(),
                        Some(false) => "0".into(),
                        None => "NA".into(),
                    })
                    .collect(),
            );
        }
        let mut done_parents = Vec::new();
        for c in self.covariates() {
            match &c.parent {
                None => {
                    header.push(format!("x.{}", c.label));
                    cols.push(c.values.iter().map(|v| fmt_num(*v)).collect());
                }
                Some(parent) => {
                    if done_parents.contains(parent) {
                        continue;
                    }
                    done_parents.push(parent.clone());
                    let members: Vec<&Covariate> = self
                        .covariates()
                        .iter()
                        .filter(|d| d.parent.as_ref() == Some(parent))
                        .collect();
                    let prefix = format!("{parent}=");
                    let col = (0..n)
                        .map(|i| {
                            if members.iter().any(|m| m.values[i].is_nan()) {
                                return "NA".to_string();
                            }
                            members
                                .iter()
                                .find(|m| m.values[i] == 1.0)
                                .map(|m| m.label[prefix.len()..].to_string())
                                .unwrap_or_else(|| "NA".to_string())
                        })
                        .collect();
                    header.push(format!("x.{parent}"));
                    cols.push(col);
                }
            }
        }
        header.push("weight".into());
        cols.push(self.weights().iter().map(|v| fmt_num(*v)).collect());
        for (k, pv) in self.plausible_values().iter().enumerate() {
            for (t, y) in pv.iter().enumerate() {
                header.push(format!("pv.{}.y.{}", k + 1, t + 1));
                cols.push(y.iter().map(|v| fmt_num(*v)).collect());
            }
        }
        for t in 2..=self.n_waves() {
            if let Some(p) = self.supplied_propensity(t) {
                header.push(format!("pi.{t}"));
                cols.push(p.iter().map(|v| fmt_num(*v)).collect());
            }
        }
        w.write_record(&header)?;
        for i in 0..n {
            w.write_record(cols.iter().map(|c| c[i].as_str()))?;
        }
        w.flush()?;
        Ok(())
    }
}
