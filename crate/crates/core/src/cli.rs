//! The `lbcf` command line: `simulate`, `fit`, `predict`, `summarize` and
//! `benchmark`.
//!
//! Exit status is 0 on success, 1 for invalid input or usage, and 2 when
//! estimation is refused (a wave without treated or untreated subjects).
//! Progress goes to standard error; results go to files only, each carrying
//! the package version and the fully resolved configuration.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    build_report, summarize_effects, summarize_prediction, write_ate_csv, write_effects_csv,
    write_histogram, write_report,
};
use crate::data::{load_csv, load_csv_with_encoding, SchemaSpec};
use crate::error::{Error, Result};
use crate::model::{fit_chains, predict, FitOptions, HyperParams, PosteriorDraws, PropensityInput};
use crate::propensity::PropensityMethod;
use crate::sim::{gen_dgp1, gen_dgp2, run_benchmark, BenchConfig, Dgp1Config, DgpSpec};

#[derive(Debug, Parser)]
#[command(name = "lbcf", version, about = "Longitudinal Bayesian causal forests")]
struct Cli {
    /// Worker threads for chains and replications (default: all cores).
    /// With 1 thread every run is bit-for-bit reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Only report warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a benchmark dataset and its ground truth.
    Simulate(SimulateArgs),
    /// Fit the model to a wide-format CSV and write a draw file.
    Fit(FitArgs),
    /// Evaluate a draw file on new rows.
    Predict(PredictArgs),
    /// Average effects, per-subject intervals and variable importance.
    Summarize(SummarizeArgs),
    /// Replicated simulation benchmark.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Data-generating process: 1 (heterogeneous growth and effects) or
    /// 2 (three waves, time-varying confounding).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    dgp: u8,
    #[arg(long)]
    n_train: Option<usize>,
    /// Held-out rows (process 1 only).
    #[arg(long)]
    n_test: Option<usize>,
    /// Outcome noise SD (process 1 only).
    #[arg(long)]
    sigma: Option<f64>,
    /// Set every treatment effect to zero (process 1 only).
    #[arg(long)]
    null_effect: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, short)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Wide-format CSV.
    #[arg(long)]
    data: PathBuf,
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Draw file to write.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Chains on the observed outcome when the data has no plausible values.
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    n_burn: Option<usize>,
    #[arg(long)]
    n_save: Option<usize>,
    /// Tree counts as `MU,DELTA,TAU`.
    #[arg(long, value_parser = parse_trees)]
    trees: Option<(usize, usize, usize)>,
    /// Start from the longer applied-analysis settings instead of the
    /// simulation settings.
    #[arg(long)]
    applied: bool,
    #[arg(long, value_parser = parse_method, conflicts_with = "true_propensity")]
    propensity_method: Option<PropensityMethod>,
    /// Use the data's `pi.<w>` columns as the propensity.
    #[arg(long)]
    true_propensity: bool,
    /// Fit the observed outcome even when plausible values are present.
    #[arg(long)]
    ignore_plausible_values: bool,
    #[arg(long)]
    weight_column: Option<String>,
    #[arg(long)]
    id_column: Option<String>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    draws: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Per-row effect summaries.
    #[arg(long, short)]
    out: PathBuf,
    /// Also write the posterior mean fitted outcome per wave.
    #[arg(long)]
    fitted: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    weight_column: Option<String>,
    #[arg(long)]
    id_column: Option<String>,
}

#[derive(Debug, Args)]
struct SummarizeArgs {
    #[arg(long)]
    draws: PathBuf,
    #[arg(long, short)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Histogram bins for the gnuplot data files; 0 skips them.
    #[arg(long, default_value_t = 30)]
    bins: usize,
}

#[derive(Debug, Args)]
struct BenchmarkArgs {
    /// JSON benchmark configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    dgp: Option<u8>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated estimator ids (`lbcf`, `bart_diff`).
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    null_effect: bool,
    #[arg(long)]
    true_propensity: bool,
    #[arg(long)]
    n_burn: Option<usize>,
    #[arg(long)]
    n_save: Option<usize>,
    /// Per-replication records; existing records are reused (default:
    /// `<out-dir>/records.csv`).
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long, short)]
    out_dir: PathBuf,
}

fn parse_trees(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [m, d, t] => Ok((m, d, t)),
        _ => Err("expected three counts MU,DELTA,TAU".into()),
    }
}

fn parse_method(s: &str) -> std::result::Result<PropensityMethod, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Resolved settings of a `fit` run, as read from `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub hyper: HyperParams,
    pub fit: FitOptions,
    pub data: SchemaSpec,
    /// One chain per plausible value when the data has them.
    pub plausible_values: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            hyper: HyperParams::default(),
            fit: FitOptions::default(),
            data: SchemaSpec::default(),
            plausible_values: true,
        }
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| dispatch(cli.command)),
        Err(e) => Err(Error::Validation(format!("cannot start worker threads: {e}"))),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_estimation_refused() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Summarize(a) => summarize(a),
        Command::Benchmark(a) => benchmark(a),
    }
}

fn provenance(config: &impl Serialize) -> Result<String> {
    Ok(format!(
        "lbcf {}\nconfig: {}",
        env!("CARGO_PKG_VERSION"),
        serde_json::to_string(config)?
    ))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct SimulateConfig {
    command: &'static str,
    dgp: DgpSpec,
    seed: u64,
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let spec = if a.dgp == 1 {
        let d = Dgp1Config::default();
        DgpSpec::Dgp1(Dgp1Config {
            n_train: a.n_train.unwrap_or(d.n_train),
            n_test: a.n_test.unwrap_or(d.n_test),
            sigma: a.sigma.unwrap_or(d.sigma),
            null_effect: a.null_effect,
        })
    } else {
        if a.n_test.is_some() || a.sigma.is_some() || a.null_effect {
            return Err(Error::Validation(
                "--n-test, --sigma and --null-effect apply to process 1 only".into(),
            ));
        }
        DgpSpec::Dgp2 {
            n: a.n_train.unwrap_or(500),
        }
    };
    let comment = provenance(&SimulateConfig {
        command: "simulate",
        dgp: spec,
        seed: a.seed,
    })?;
    let sim = match spec {
        DgpSpec::Dgp1(c) => gen_dgp1(&c, a.seed)?,
        DgpSpec::Dgp2 { n } => gen_dgp2(n, a.seed)?,
    };
    fs::create_dir_all(&a.out_dir)?;
    sim.train
        .write_csv(create(&a.out_dir.join("train.csv"))?, Some(&comment))?;
    sim.truth_train.write_csv(
        create(&a.out_dir.join("truth_train.csv"))?,
        sim.train.ids(),
        Some(&comment),
    )?;
    if let Some((test, truth)) = &sim.test {
        test.write_csv(create(&a.out_dir.join("test.csv"))?, Some(&comment))?;
        truth.write_csv(
            create(&a.out_dir.join("truth_test.csv"))?,
            test.ids(),
            Some(&comment),
        )?;
    }
    log::info!("wrote simulated data to {}", a.out_dir.display());
    Ok(())
}

fn resolve_fit_config(a: &FitArgs) -> Result<FitConfig> {
    let mut cfg: FitConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => FitConfig::default(),
    };
    if a.applied {
        let seed = cfg.hyper.seed;
        cfg.hyper = HyperParams::applied().with_seed(seed);
    }
    if let Some(s) = a.seed {
        cfg.hyper.seed = s;
    }
    if let Some((m, d, t)) = a.trees {
        cfg.hyper = cfg.hyper.clone().with_trees(m, d, t);
    }
    if let Some(b) = a.n_burn {
        cfg.hyper.n_burn = b;
    }
    if let Some(s) = a.n_save {
        cfg.hyper.n_save = s;
    }
    if let Some(c) = a.chains {
        cfg.fit.n_chains = c;
    }
    if let Some(m) = a.propensity_method {
        cfg.fit.propensity = match m {
            PropensityMethod::Supplied => PropensityInput::Dataset,
            m => PropensityInput::Estimate(m),
        };
    }
    if a.true_propensity {
        cfg.fit.propensity = PropensityInput::Dataset;
    }
    if a.ignore_plausible_values {
        cfg.plausible_values = false;
    }
    if let Some(w) = &a.weight_column {
        cfg.data.weight_column = w.clone();
    }
    if let Some(id) = &a.id_column {
        cfg.data.id_column = id.clone();
    }
    cfg.hyper.validate()?;
    Ok(cfg)
}

fn fit(a: FitArgs) -> Result<()> {
    let cfg = resolve_fit_config(&a)?;
    let mut data = load_csv(&a.data, &cfg.data)?;
    for w in data.warnings() {
        log::warn!("{w}");
    }
    if !cfg.plausible_values {
        data = data.with_plausible_values(Vec::new())?;
    }
    log::info!(
        "fitting {} subjects over {} waves ({} chain(s))",
        data.n_subjects(),
        data.n_waves(),
        if data.plausible_values().is_empty() {
            cfg.fit.n_chains
        } else {
            data.plausible_values().len()
        }
    );
    let mut draws = fit_chains(&data, &cfg.hyper, &cfg.fit)?;
    draws.meta.config = serde_json::json!({ "command": "fit", "fit": cfg });
    draws.save(&a.out)?;
    log::info!("wrote {} draws to {}", draws.len(), a.out.display());
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let draws = PosteriorDraws::load(&a.draws)?;
    let mut spec: SchemaSpec = draws
        .meta
        .config
        .get("fit")
        .and_then(|f| f.get("data"))
        .and_then(|d| serde_json::from_value(d.clone()).ok())
        .unwrap_or_default();
    if let Some(w) = &a.weight_column {
        spec.weight_column = w.clone();
    }
    if let Some(id) = &a.id_column {
        spec.id_column = id.clone();
    }
    let data = load_csv_with_encoding(&a.data, &spec, &draws.meta.schema.encoding)?;
    for w in data.warnings() {
        log::warn!("{w}");
    }
    let prediction = predict(&draws, &data)?;
    let summary = summarize_prediction(&prediction, Some(data.weights()), a.level)?;
    let comment = provenance(&serde_json::json!({
        "command": "predict",
        "level": a.level,
        "draws": a.draws,
        "fit": draws.meta.config,
    }))?;
    write_effects_csv(create(&a.out)?, &summary, Some(&comment))?;
    if let Some(path) = &a.fitted {
        let mut out = create(path)?;
        use std::io::Write;
        for line in comment.lines() {
            writeln!(out, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        let t = prediction.draws.first().map_or(0, |d| d.y_hat.len());
        let mut header = vec!["subject_id".to_string()];
        header.extend((1..=t).map(|k| format!("y_hat.{k}")));
        w.write_record(&header)?;
        let m = prediction.draws.len() as f64;
        for (i, id) in prediction.ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            for k in 0..t {
                let mean = prediction.draws.iter().map(|d| d.y_hat[k][i]).sum::<f64>() / m;
                row.push(if mean.is_nan() { "NA".into() } else { mean.to_string() });
            }
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    log::info!("wrote predictions for {} rows to {}", data.n_subjects(), a.out.display());
    Ok(())
}

fn summarize(a: SummarizeArgs) -> Result<()> {
    let draws = PosteriorDraws::load(&a.draws)?;
    let summary = summarize_effects(&draws, a.level)?;
    let config = serde_json::json!({
        "command": "summarize",
        "level": a.level,
        "bins": a.bins,
        "draws": a.draws,
        "fit": draws.meta.config,
    });
    let comment = provenance(&config)?;
    fs::create_dir_all(&a.out_dir)?;
    write_effects_csv(create(&a.out_dir.join("effects.csv"))?, &summary, Some(&comment))?;
    write_ate_csv(create(&a.out_dir.join("ate.csv"))?, &summary, Some(&comment))?;
    let report = build_report(&draws, &summary, config)?;
    write_report(create(&a.out_dir.join("report.json"))?, &report)?;
    if a.bins > 0 {
        for we in &summary.waves {
            let w = we.wave;
            let present = |v: Vec<f64>| -> Vec<f64> {
                v.into_iter().zip(&we.present).filter(|(_, p)| **p).map(|(x, _)| x).collect()
            };
            for (name, values, what) in [
                (format!("hist_ate_{w}.dat"), we.ate.clone(), "posterior draws of the weighted ATE"),
                (format!("hist_tau_{w}.dat"), present(we.tau_means()), "posterior mean tau_i"),
                (format!("hist_delta_{w}.dat"), present(we.delta_means()), "posterior mean delta_i"),
            ] {
                let c = format!("{comment}\nwave {w}: {what}");
                write_histogram(create(&a.out_dir.join(name))?, &values, a.bins, Some(&c))?;
            }
        }
    }
    log::info!("wrote summaries to {}", a.out_dir.display());
    Ok(())
}

fn resolve_bench_config(a: &BenchmarkArgs) -> Result<BenchConfig> {
    let mut cfg: BenchConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => BenchConfig::default(),
    };
    match a.dgp {
        Some(1) if !matches!(cfg.dgp, DgpSpec::Dgp1(_)) => cfg.dgp = DgpSpec::Dgp1(Dgp1Config::default()),
        Some(2) if !matches!(cfg.dgp, DgpSpec::Dgp2 { .. }) => cfg.dgp = DgpSpec::Dgp2 { n: 500 },
        _ => {}
    }
    match &mut cfg.dgp {
        DgpSpec::Dgp1(c) => {
            if let Some(n) = a.n_train {
                c.n_train = n;
            }
            if let Some(n) = a.n_test {
                c.n_test = n;
            }
            if let Some(s) = a.sigma {
                c.sigma = s;
            }
            c.null_effect |= a.null_effect;
        }
        DgpSpec::Dgp2 { n } => {
            if a.n_test.is_some() || a.sigma.is_some() || a.null_effect {
                return Err(Error::Validation(
                    "--n-test, --sigma and --null-effect apply to process 1 only".into(),
                ));
            }
            if let Some(v) = a.n_train {
                *n = v;
            }
        }
    }
    if let Some(r) = a.reps {
        cfg.n_reps = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = &a.estimators {
        cfg.estimators = e.clone();
    }
    cfg.lbcf.true_propensity |= a.true_propensity;
    if let Some(b) = a.n_burn {
        cfg.lbcf.hyper.n_burn = b;
        cfg.bart_diff.n_burn = b;
    }
    if let Some(s) = a.n_save {
        cfg.lbcf.hyper.n_save = s;
        cfg.bart_diff.n_save = s;
    }
    Ok(cfg)
}

fn benchmark(a: BenchmarkArgs) -> Result<()> {
    let cfg = resolve_bench_config(&a)?;
    fs::create_dir_all(&a.out_dir)?;
    let records = a.records.clone().unwrap_or_else(|| a.out_dir.join("records.csv"));
    let report = run_benchmark(&cfg, Some(&records))?;
    let mut out = create(&a.out_dir.join("report.json"))?;
    serde_json::to_writer_pretty(&mut out, &report)?;
    use std::io::Write;
    writeln!(out)?;
    let mut table = create(&a.out_dir.join("table.txt"))?;
    write!(table, "# {}\n{}", provenance(&cfg)?.replace('\n', "\n# "), report.table())?;
    log::info!("benchmark finished; results in {}", a.out_dir.display());
    Ok(())
}
