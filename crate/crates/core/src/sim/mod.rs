//! Simulation benchmarks with known ground truth.

pub mod baseline;
pub mod bench;
pub mod dgp;
mod metrics;

pub use dgp::{gen_dgp1, gen_dgp2, Dgp1Config, SimInstance, Truth};
pub use baseline::{fit_bart, fit_difference, BartConfig, BartFit, DifferenceEffects, DifferenceFit};
pub use bench::{
    estimator, run_benchmark, run_benchmark_with, Aggregate, BartDiff, BenchConfig, DgpSpec, Estimator,
    Lbcf, LbcfSettings, Record, SimReport, WaveEstimate,
};
pub use metrics::{evaluate_metrics, Metrics};
