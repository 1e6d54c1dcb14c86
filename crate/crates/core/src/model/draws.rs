//! Saved posterior draws and their newline-delimited JSON file format.
//!
//! A draw file is UTF-8 text. The first line is a header object
//! `{"format": "lbcf-draws", "version": 1, "meta": {...}}` carrying the
//! hyperparameters, model schema and its hash, per-chain seeds,
//! standardization constants and propensity models, and the training
//! subjects. Every following line is one [`Draw`]. Floats are written in
//! shortest round-trip form, so loading a file reproduces the draws exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schema::ModelSchema;
use super::HyperParams;
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::propensity::PropensityModel;
use crate::tree::{Forest, ForestKind};

pub const FORMAT: &str = "lbcf-draws";
pub const FORMAT_VERSION: u32 = 1;

/// One saved iteration of one chain. Fits are on the original outcome scale;
/// `sigma2` is on the standardized scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub chain: usize,
    /// Index among the chain's saved iterations.
    pub iteration: usize,
    pub sigma2: f64,
    /// Current values of the missing treatment cells listed in the metadata.
    pub imputed_z: Vec<u8>,
    /// `mu`, then `delta.w` and `tau.w` for each wave.
    pub forests: Vec<Forest>,
    pub mu: Vec<f64>,
    /// `delta[w - 2][i]`.
    pub delta: Vec<Vec<f64>>,
    /// `tau[w - 2][i]`.
    pub tau: Vec<Vec<f64>>,
}

impl Draw {
    pub fn forest(&self, kind: ForestKind) -> Option<&Forest> {
        self.forests.iter().find(|f| f.kind() == kind)
    }

    pub fn delta(&self, w: usize) -> &[f64] {
        &self.delta[w - 2]
    }

    pub fn tau(&self, w: usize) -> &[f64] {
        &self.tau[w - 2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavePropensity {
    pub wave: usize,
    pub model: PropensityModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub chain: usize,
    pub seed: u64,
    /// Plausible-value index (1-based) the chain was fit to, if any.
    pub replicate: Option<usize>,
    pub standardizer: Standardizer,
    pub propensity: Vec<WavePropensity>,
    /// Fraction of accepted structure moves per forest kind.
    #[serde(default)]
    pub acceptance: Vec<(String, f64)>,
}

/// The training subjects, for weighting and restricting summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subjects {
    pub ids: Vec<String>,
    pub weights: Vec<f64>,
    /// Last observed wave per subject.
    pub last_wave: Vec<usize>,
    /// Observed treatment indicators `[w - 2][i]`.
    pub treatments: Vec<Vec<Option<bool>>>,
}

impl Subjects {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn present(&self, i: usize, wave: usize) -> bool {
        self.last_wave[i] >= wave
    }
}

/// A missing treatment cell, imputed during sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingCell {
    pub wave: usize,
    pub subject: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawsMeta {
    pub package_version: String,
    /// Resolved run configuration, if the draws came from a configured run.
    #[serde(default)]
    pub config: serde_json::Value,
    pub hyper: HyperParams,
    pub schema: ModelSchema,
    pub schema_hash: String,
    pub freeze_tau: bool,
    pub chains: Vec<ChainMeta>,
    pub subjects: Subjects,
    pub missing_z: Vec<MissingCell>,
}

impl DrawsMeta {
    pub fn n_waves(&self) -> usize {
        self.schema.n_waves
    }

    pub fn chain(&self, id: usize) -> Result<&ChainMeta> {
        self.chains
            .iter()
            .find(|c| c.chain == id)
            .ok_or_else(|| Error::Validation(format!("no metadata for chain {id}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub meta: DrawsMeta,
    pub draws: Vec<Draw>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    meta: DrawsMeta,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn n_waves(&self) -> usize {
        self.meta.n_waves()
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        let header = Header {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            meta: self.meta.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for d in &self.draws {
            serde_json::to_writer(&mut out, d)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(File::create(path.as_ref())?)
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Validation("empty draw file".into()))??;
        let header: Header = serde_json::from_str(&first)?;
        if header.format != FORMAT {
            return Err(Error::Validation(format!(
                "not a draw file (format `{}`)",
                header.format
            )));
        }
        if header.version != FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported draw file version {}",
                header.version
            )));
        }
        if header.meta.schema.hash() != header.meta.schema_hash {
            return Err(Error::Validation("schema hash does not match schema".into()));
        }
        let mut draws = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            draws.push(serde_json::from_str(&line)?);
        }
        Ok(PosteriorDraws {
            meta: header.meta,
            draws,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::DrawFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::read(BufReader::new(file)).map_err(|e| match e {
            Error::Io(_) | Error::Json(_) | Error::Validation(_) => Error::DrawFile {
                path: path.to_path_buf(),
                message: e.to_string(),
            },
            other => other,
        })
    }
}

/// Concatenates chains fit to the same model. Chains may differ only in
/// seed, plausible value and the quantities derived from them.
pub fn pool_chains(parts: Vec<PosteriorDraws>) -> Result<PosteriorDraws> {
    let mut parts = parts.into_iter();
    let mut pooled = parts
        .next()
        .ok_or_else(|| Error::Validation("no chains to pool".into()))?;
    for p in parts {
        let a = &pooled.meta;
        let b = &p.meta;
        if a.schema_hash != b.schema_hash {
            return Err(Error::Schema("chains were fit with different schemas".into()));
        }
        let mut ha = a.hyper.clone();
        let mut hb = b.hyper.clone();
        ha.seed = 0;
        hb.seed = 0;
        if ha != hb {
            return Err(Error::Schema(
                "chains were fit with different hyperparameters".into(),
            ));
        }
        if a.freeze_tau != b.freeze_tau
            || a.subjects.ids != b.subjects.ids
            || a.subjects.last_wave != b.subjects.last_wave
            || a.missing_z != b.missing_z
        {
            return Err(Error::Schema("chains were fit to different subjects".into()));
        }
        for c in &p.meta.chains {
            if pooled.meta.chains.iter().any(|x| x.chain == c.chain) {
                return Err(Error::Validation(format!("chain id {} appears twice", c.chain)));
            }
        }
        pooled.meta.chains.extend(p.meta.chains);
        pooled.draws.extend(p.draws);
    }
    Ok(pooled)
}
