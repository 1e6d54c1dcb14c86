//! Replicated benchmarks with per-replication records on disk.
//!
//! Replication `k` generates its dataset from seed `seed ^ k`; estimators
//! get a seed derived from it. Each finished (replication, estimator) pair
//! is appended to a long-format CSV, so an interrupted run picks up where
//! it stopped.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baseline::{fit_difference, BartConfig};
use super::dgp::{gen_dgp1, gen_dgp2, Dgp1Config, SimInstance};
use super::metrics::evaluate_metrics;
use crate::analysis::{interval, summarize_effects, summarize_prediction, Interval};
use crate::error::{Error, Result};
use crate::model::{fit, predict, FitOptions, HyperParams, PropensityInput};

/// Which process to simulate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dgp", rename_all = "snake_case")]
pub enum DgpSpec {
    Dgp1(Dgp1Config),
    Dgp2 { n: usize },
}

impl DgpSpec {
    pub fn generate(&self, seed: u64) -> Result<SimInstance> {
        match self {
            DgpSpec::Dgp1(cfg) => gen_dgp1(cfg, seed),
            DgpSpec::Dgp2 { n } => gen_dgp2(*n, seed),
        }
    }
}

/// Effect estimates for one wave on the evaluation rows.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveEstimate {
    pub wave: usize,
    pub tau: Vec<Interval>,
    pub delta: Vec<Interval>,
    pub ate: Interval,
}

pub trait Estimator: Send + Sync {
    fn id(&self) -> &str;

    /// Estimates effects on `sim.evaluation()` rows at credible `level`.
    fn estimate(&self, sim: &SimInstance, seed: u64, level: f64) -> Result<Vec<WaveEstimate>>;
}

/// The longitudinal causal forest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbcfSettings {
    pub hyper: HyperParams,
    pub fit: FitOptions,
    /// Feed the simulated true propensity instead of an estimate.
    pub true_propensity: bool,
}

pub struct Lbcf(pub LbcfSettings);

impl Estimator for Lbcf {
    fn id(&self) -> &str {
        "lbcf"
    }

    fn estimate(&self, sim: &SimInstance, seed: u64, level: f64) -> Result<Vec<WaveEstimate>> {
        let hp = self.0.hyper.clone().with_seed(seed);
        let mut opts = self.0.fit.clone();
        if self.0.true_propensity {
            opts.propensity = PropensityInput::Dataset;
        }
        let draws = fit(&sim.train, &hp, &opts)?;
        let summary = match &sim.test {
            Some((test, _)) => summarize_prediction(&predict(&draws, test)?, None, level)?,
            None => {
                let mut s = summarize_effects(&draws, level)?;
                // simulated subjects are equally weighted
                let ones = vec![1.0; s.ids.len()];
                for w in &mut s.waves {
                    w.ate = draws
                        .draws
                        .iter()
                        .map(|d| crate::analysis::weighted_mean(d.tau(w.wave), &ones, |i| w.present[i]))
                        .collect();
                    w.ate_interval = interval(&w.ate, level);
                }
                s
            }
        };
        Ok(summary
            .waves
            .into_iter()
            .map(|w| WaveEstimate {
                wave: w.wave,
                tau: w.tau,
                delta: w.delta,
                ate: w.ate_interval,
            })
            .collect())
    }
}

/// BART on the differenced outcome, one fit per wave.
pub struct BartDiff(pub BartConfig);

impl Estimator for BartDiff {
    fn id(&self) -> &str {
        "bart_diff"
    }

    fn estimate(&self, sim: &SimInstance, seed: u64, level: f64) -> Result<Vec<WaveEstimate>> {
        let (eval, _) = sim.evaluation();
        let mut out = Vec::new();
        for w in 2..=sim.train.n_waves() {
            let fit = fit_difference(&sim.train, w, &self.0, seed.wrapping_add(w as u64))?;
            let eff = fit.effects(eval)?;
            let n = eval.n_subjects();
            let per_row = |m: &[Vec<f64>]| -> Vec<Interval> {
                (0..n)
                    .map(|i| interval(&m.iter().map(|d| d[i]).collect::<Vec<_>>(), level))
                    .collect()
            };
            let ate: Vec<f64> = eff.tau.iter().map(|d| d.iter().sum::<f64>() / n as f64).collect();
            out.push(WaveEstimate {
                wave: w,
                tau: per_row(&eff.tau),
                delta: per_row(&eff.delta),
                ate: interval(&ate, level),
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub dgp: DgpSpec,
    pub n_reps: usize,
    pub seed: u64,
    pub estimators: Vec<String>,
    pub level: f64,
    pub lbcf: LbcfSettings,
    pub bart_diff: BartConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            dgp: DgpSpec::Dgp1(Dgp1Config::default()),
            n_reps: 100,
            seed: 1,
            estimators: vec!["lbcf".into(), "bart_diff".into()],
            level: 0.95,
            lbcf: LbcfSettings::default(),
            bart_diff: BartConfig::default(),
        }
    }
}

/// Builds an estimator from its id (`lbcf` or `bart_diff`).
pub fn estimator(id: &str, cfg: &BenchConfig) -> Result<Box<dyn Estimator>> {
    match id {
        "lbcf" => Ok(Box::new(Lbcf(cfg.lbcf.clone()))),
        "bart_diff" => Ok(Box::new(BartDiff(cfg.bart_diff))),
        other => Err(Error::UnknownEstimator(other.to_string())),
    }
}

/// One metric of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub rep: usize,
    pub seed: u64,
    pub estimator: String,
    pub wave: usize,
    /// `tau`, `delta` or `ate`.
    pub target: String,
    pub metric: String,
    pub value: f64,
}

/// Mean over replications of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub estimator: String,
    pub wave: usize,
    pub target: String,
    pub metric: String,
    pub mean: f64,
    /// Monte-Carlo standard error of the mean.
    pub se: f64,
    pub n_reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub package_version: String,
    pub config: BenchConfig,
    pub records: Vec<Record>,
    pub aggregates: Vec<Aggregate>,
}

impl SimReport {
    pub fn aggregate(&self, estimator: &str, wave: usize, target: &str, metric: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| {
            a.estimator == estimator && a.wave == wave && a.target == target && a.metric == metric
        })
    }

    /// Plain-text table, one line per estimator and wave.
    pub fn table(&self) -> String {
        const COLUMNS: [(&str, &str, &str); 10] = [
            ("delta", "rmse", "RMSE(d)"),
            ("tau", "rmse", "PEHE"),
            ("tau", "bias", "bias(t)"),
            ("tau", "coverage", "cover(t)"),
            ("tau", "width", "width(t)"),
            ("delta", "bias", "bias(d)"),
            ("delta", "coverage", "cover(d)"),
            ("ate", "bias", "ATE bias"),
            ("ate", "coverage", "ATE cover"),
            ("ate", "width", "ATE width"),
        ];
        let keys: BTreeSet<(String, usize)> = self
            .aggregates
            .iter()
            .map(|a| (a.estimator.clone(), a.wave))
            .collect();
        let mut s = format!("{:<10} {:>4}", "estimator", "wave");
        for (_, _, h) in COLUMNS {
            s += &format!(" {h:>9}");
        }
        s.push('\n');
        for (est, wave) in keys {
            s += &format!("{est:<10} {wave:>4}");
            for (target, metric, _) in COLUMNS {
                match self.aggregate(&est, wave, target, metric) {
                    Some(a) if a.mean.is_finite() => s += &format!(" {:>9.3}", a.mean),
                    _ => s += &format!(" {:>9}", "-"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Seed of replication `k`.
pub fn rep_seed(seed: u64, k: usize) -> u64 {
    seed ^ k as u64
}

/// Seed handed to estimators in replication `k`, kept apart from the data seed.
pub fn estimator_seed(seed: u64, k: usize) -> u64 {
    rep_seed(seed, k).wrapping_add(0x9E37_79B9_7F4A_7C15)
}

fn records_for(k: usize, seed: u64, id: &str, sim: &SimInstance, est: &[WaveEstimate]) -> Result<Vec<Record>> {
    let (_, truth) = sim.evaluation();
    let mut out = Vec::new();
    let mut push = |wave: usize, target: &str, metric: &str, value: f64| {
        out.push(Record {
            rep: k,
            seed,
            estimator: id.to_string(),
            wave,
            target: target.into(),
            metric: metric.into(),
            value,
        })
    };
    for e in est {
        let w = e.wave;
        for (target, truth, intervals) in [("tau", &truth.tau[w - 2], &e.tau), ("delta", &truth.delta[w - 2], &e.delta)] {
            let m = evaluate_metrics(truth, intervals)?;
            if m.rmse.is_nan() {
                continue;
            }
            push(w, target, "rmse", m.rmse);
            push(w, target, "bias", m.mean_abs_bias);
            push(w, target, "coverage", m.coverage);
            push(w, target, "width", m.width);
        }
        let ate = truth.ate[w - 2];
        push(w, "ate", "estimate", e.ate.mean);
        push(w, "ate", "bias", (e.ate.mean - ate).abs());
        push(w, "ate", "coverage", e.ate.contains(ate) as u8 as f64);
        push(w, "ate", "width", e.ate.width());
        push(w, "ate", "truth", ate);
    }
    Ok(out)
}

fn header_lines(cfg: &BenchConfig) -> Result<String> {
    Ok(format!(
        "# lbcf {}\n# config: {}\n",
        env!("CARGO_PKG_VERSION"),
        serde_json::to_string(cfg)?
    ))
}

const RECORD_HEADER: &str = "rep,seed,estimator,wave,target,metric,value";

/// Reads the complete records of an earlier run, or nothing when the file
/// does not exist. A trailing partial line is dropped.
fn load_records(path: &Path, header: &str) -> Result<Vec<Record>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let text: Vec<String> = BufReader::new(file).lines().collect::<std::io::Result<_>>()?;
    let comments: String = text
        .iter()
        .take_while(|l| l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    if comments != header {
        return Err(Error::Validation(format!(
            "{} was written by a different benchmark configuration",
            path.display()
        )));
    }
    let body = text.iter().skip_while(|l| l.starts_with('#')).cloned().collect::<Vec<_>>().join("\n");
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.deserialize::<Record>() {
        match rec {
            Ok(r) => out.push(r),
            Err(_) => break,
        }
    }
    Ok(out)
}

fn write_records<W: Write>(out: &mut W, records: &[Record]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Runs the configured estimators, resolving ids with [`estimator`].
pub fn run_benchmark(cfg: &BenchConfig, records: Option<&Path>) -> Result<SimReport> {
    let estimators = cfg
        .estimators
        .iter()
        .map(|id| estimator(id, cfg))
        .collect::<Result<Vec<_>>>()?;
    run_benchmark_with(cfg, &estimators, records)
}

/// Runs `estimators` over `cfg.n_reps` replications. With a `records` path,
/// finished (replication, estimator) pairs found there are not rerun.
pub fn run_benchmark_with(
    cfg: &BenchConfig,
    estimators: &[Box<dyn Estimator>],
    records: Option<&Path>,
) -> Result<SimReport> {
    if cfg.n_reps == 0 {
        return Err(Error::Validation("n_reps must be positive".into()));
    }
    let header = header_lines(cfg)?;
    let mut done: Vec<Record> = match records {
        Some(p) => load_records(p, &header)?,
        None => Vec::new(),
    };
    let ids: BTreeSet<&str> = estimators.iter().map(|e| e.id()).collect();
    done.retain(|r| r.rep < cfg.n_reps && ids.contains(r.estimator.as_str()));
    let finished: BTreeSet<(usize, String)> = done.iter().map(|r| (r.rep, r.estimator.clone())).collect();

    let sink = match records {
        Some(p) => {
            // rewrite without any partial tail, then append
            let tmp = p.with_extension("tmp");
            {
                let mut f = File::create(&tmp)?;
                writeln!(f, "{header}{RECORD_HEADER}")?;
                write_records(&mut f, &done)?;
            }
            fs::rename(&tmp, p)?;
            Some(Mutex::new(OpenOptions::new().append(true).open(p)?))
        }
        None => None,
    };
    let collected = Mutex::new(done);

    let todo: Vec<usize> = (0..cfg.n_reps)
        .filter(|k| estimators.iter().any(|e| !finished.contains(&(*k, e.id().to_string()))))
        .collect();
    todo.par_iter().try_for_each(|&k| -> Result<()> {
        let seed = rep_seed(cfg.seed, k);
        let sim = cfg.dgp.generate(seed)?;
        for e in estimators {
            if finished.contains(&(k, e.id().to_string())) {
                continue;
            }
            let est = e.estimate(&sim, estimator_seed(cfg.seed, k), cfg.level)?;
            let recs = records_for(k, seed, e.id(), &sim, &est)?;
            if let Some(f) = &sink {
                write_records(&mut *f.lock().expect("records lock"), &recs)?;
            }
            log::info!("replication {k}: {} done", e.id());
            collected.lock().expect("records lock").extend(recs);
        }
        Ok(())
    })?;

    let mut records = collected.into_inner().expect("records lock");
    records.sort_by(|a, b| {
        (a.rep, &a.estimator, a.wave, &a.target, &a.metric).cmp(&(b.rep, &b.estimator, b.wave, &b.target, &b.metric))
    });
    let aggregates = aggregate(&records);
    Ok(SimReport {
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        records,
        aggregates,
    })
}

fn aggregate(records: &[Record]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(String, usize, String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.estimator.clone(), r.wave, r.target.clone(), r.metric.clone()))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((estimator, wave, target, metric), v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            Aggregate {
                estimator,
                wave,
                target,
                metric,
                mean,
                se: (var / n).sqrt(),
                n_reps: v.len(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Returns the truth itself as a point estimate.
    struct Oracle {
        calls: Arc<AtomicUsize>,
    }

    impl Estimator for Oracle {
        fn id(&self) -> &str {
            "oracle"
        }

        fn estimate(&self, sim: &SimInstance, _seed: u64, _level: f64) -> Result<Vec<WaveEstimate>> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let (_, truth) = sim.evaluation();
            let point = |v: &f64| Interval { mean: *v, lo: *v, hi: *v };
            Ok((0..truth.tau.len())
                .map(|k| WaveEstimate {
                    wave: k + 2,
                    tau: truth.tau[k].iter().map(point).collect(),
                    delta: truth.delta[k].iter().map(point).collect(),
                    ate: point(&truth.ate[k]),
                })
                .collect())
        }
    }

    fn small(n_reps: usize) -> BenchConfig {
        BenchConfig {
            dgp: DgpSpec::Dgp1(Dgp1Config {
                n_train: 30,
                n_test: 20,
                ..Dgp1Config::default()
            }),
            n_reps,
            estimators: vec!["oracle".into()],
            ..BenchConfig::default()
        }
    }

    fn oracle() -> Vec<Box<dyn Estimator>> {
        vec![Box::new(Oracle { calls: Arc::new(AtomicUsize::new(0)) })]
    }

    #[test]
    fn oracle_estimates_score_perfectly() {
        let r = run_benchmark_with(&small(1), &oracle(), None).unwrap();
        for (target, metric, want) in [
            ("tau", "rmse", 0.0),
            ("delta", "rmse", 0.0),
            ("tau", "bias", 0.0),
            ("tau", "coverage", 1.0),
            ("delta", "coverage", 1.0),
            ("ate", "bias", 0.0),
            ("ate", "coverage", 1.0),
        ] {
            assert_eq!(r.aggregate("oracle", 2, target, metric).unwrap().mean, want, "{target} {metric}");
        }
        assert!(r.table().contains("oracle"));
    }

    #[test]
    fn dgp2_has_no_delta_metrics() {
        let cfg = BenchConfig {
            dgp: DgpSpec::Dgp2 { n: 40 },
            ..small(2)
        };
        let r = run_benchmark_with(&cfg, &oracle(), None).unwrap();
        assert!(r.aggregate("oracle", 3, "delta", "rmse").is_none());
        assert_eq!(r.aggregate("oracle", 3, "ate", "truth").unwrap().mean, 1.0);
        assert_eq!(r.aggregate("oracle", 3, "tau", "rmse").unwrap().n_reps, 2);
    }

    #[test]
    fn unknown_estimator_is_an_error() {
        let cfg = BenchConfig {
            estimators: vec!["grf".into()],
            ..small(1)
        };
        assert!(matches!(run_benchmark(&cfg, None), Err(Error::UnknownEstimator(_))));
    }

    #[test]
    fn interrupted_runs_resume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.csv");
        let cfg = small(3);
        let counted = |calls: &Arc<AtomicUsize>| -> Vec<Box<dyn Estimator>> {
            vec![Box::new(Oracle { calls: calls.clone() })]
        };
        let calls = Arc::new(AtomicUsize::new(0));
        let full = run_benchmark_with(&cfg, &counted(&calls), Some(&path)).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 3);

        // lose replication 2 and leave a torn line behind
        let text = fs::read_to_string(&path).unwrap();
        let mut kept: String = text.lines().filter(|l| !l.starts_with("2,")).map(|l| format!("{l}\n")).collect();
        kept.push_str("2,99,ora");
        fs::write(&path, kept).unwrap();

        let calls = Arc::new(AtomicUsize::new(0));
        let resumed = run_benchmark_with(&cfg, &counted(&calls), Some(&path)).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        assert_eq!(resumed.records, full.records);
        assert_eq!(resumed.aggregate("oracle", 2, "tau", "rmse").unwrap().n_reps, 3);

        let calls = Arc::new(AtomicUsize::new(0));
        run_benchmark_with(&cfg, &counted(&calls), Some(&path)).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 0);

        let other = BenchConfig { seed: 2, ..cfg };
        assert!(run_benchmark_with(&other, &counted(&calls), Some(&path)).is_err());
    }
}
