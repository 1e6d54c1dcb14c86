//! Benchmark data-generating processes with stored ground truth.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Covariate, PanelDataset};
use crate::error::{Error, Result};
use crate::propensity::expit;

/// True components per subject. Vectors indexed `[w - 2][i]` cover waves
/// `2..=T`; NaN marks a component the process does not define per subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub mu: Vec<f64>,
    pub delta: Vec<Vec<f64>>,
    pub tau: Vec<Vec<f64>>,
    pub propensity: Vec<Vec<f64>>,
    /// Population average treatment effect per wave, `ate[w - 2]`.
    pub ate: Vec<f64>,
}

impl Truth {
    fn rows(&self, rows: std::ops::Range<usize>) -> Truth {
        let cut = |v: &Vec<Vec<f64>>| v.iter().map(|w| w[rows.clone()].to_vec()).collect();
        Truth {
            mu: self.mu[rows.clone()].to_vec(),
            delta: cut(&self.delta),
            tau: cut(&self.tau),
            propensity: cut(&self.propensity),
            ate: self.ate.clone(),
        }
    }

    /// Writes `id,mu,delta.w,tau.w,p.w...` rows.
    pub fn write_csv<W: Write>(&self, out: W, ids: &[String], comment: Option<&str>) -> Result<()> {
        let mut out = out;
        if let Some(c) = comment {
            for line in c.lines() {
                writeln!(out, "# {line}")?;
            }
        }
        let mut w = csv::Writer::from_writer(out);
        let waves = self.tau.len();
        let mut header = vec!["id".to_string(), "mu".to_string()];
        for k in 0..waves {
            header.push(format!("delta.{}", k + 2));
            header.push(format!("tau.{}", k + 2));
            header.push(format!("p.{}", k + 2));
        }
        w.write_record(&header)?;
        for (i, id) in ids.iter().enumerate() {
            let mut rec = vec![id.clone(), fmt(self.mu[i])];
            for k in 0..waves {
                rec.push(fmt(self.delta[k][i]));
                rec.push(fmt(self.tau[k][i]));
                rec.push(fmt(self.propensity[k][i]));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        v.to_string()
    }
}

/// A simulated dataset. `test` holds held-out rows when the process
/// evaluates out of sample.
#[derive(Debug, Clone)]
pub struct SimInstance {
    pub train: PanelDataset,
    pub truth_train: Truth,
    pub test: Option<(PanelDataset, Truth)>,
}

impl SimInstance {
    /// The rows metrics are computed on, with their truth.
    pub fn evaluation(&self) -> (&PanelDataset, &Truth) {
        match &self.test {
            Some((d, t)) => (d, t),
            None => (&self.train, &self.truth_train),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dgp1Config {
    pub n_train: usize,
    pub n_test: usize,
    /// Outcome noise SD.
    pub sigma: f64,
    /// Set every treatment effect to zero.
    pub null_effect: bool,
}

impl Default for Dgp1Config {
    fn default() -> Self {
        Dgp1Config {
            n_train: 500,
            n_test: 1000,
            sigma: 1.0,
            null_effect: false,
        }
    }
}

/// Baseline surface of the first benchmark (Friedman's first function).
pub fn dgp1_mu(x: &[f64; 10]) -> f64 {
    10.0 * (std::f64::consts::PI * x[0] * x[1]).sin()
        + 20.0 * (x[2] - 0.5).powi(2)
        + 10.0 * x[3]
        + 5.0 * x[4]
}

/// Growth between the two waves; `x2` holds the wave-2 covariates `x11..x20`.
pub fn dgp1_delta(mu: f64, x2: &[f64; 10]) -> f64 {
    mu / 3.0 + 3.0 * x2[0].powi(2) + 2.0 * x2[4].powi(2)
}

/// Treatment effect on wave-2 growth.
pub fn dgp1_tau(x1: &[f64; 10], x2: &[f64; 10]) -> f64 {
    -x1[3] - x2[3].powi(2) - x2[4].powi(3)
}

/// Two-wave Friedman-style process: ten wave-1 covariates `U(0, 1)`, their
/// wave-2 versions `x + U(0, 0.4)` (independent noise per variable), and a
/// treatment whose probability is the logistic function of the
/// standardized `mu + delta` over all generated rows (train and test).
///
/// Columns are named `x.x1.1 .. x.x10.1` and `x.x11.2 .. x.x20.2`; the true
/// propensity is written as `pi.2`.
pub fn gen_dgp1(cfg: &Dgp1Config, seed: u64) -> Result<SimInstance> {
    if !(cfg.sigma > 0.0) {
        return Err(Error::Validation(format!("sigma must be positive, got {}", cfg.sigma)));
    }
    if cfg.n_train < 2 {
        return Err(Error::Validation("need at least two training rows".into()));
    }
    let n = cfg.n_train + cfg.n_test;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x1 = vec![[0.0; 10]; n];
    let mut x2 = vec![[0.0; 10]; n];
    for i in 0..n {
        for j in 0..10 {
            x1[i][j] = rng.random::<f64>();
        }
        for j in 0..10 {
            x2[i][j] = x1[i][j] + 0.4 * rng.random::<f64>();
        }
    }
    let mu: Vec<f64> = x1.iter().map(dgp1_mu).collect();
    let delta: Vec<f64> = (0..n).map(|i| dgp1_delta(mu[i], &x2[i])).collect();
    let tau: Vec<f64> = (0..n)
        .map(|i| if cfg.null_effect { 0.0 } else { dgp1_tau(&x1[i], &x2[i]) })
        .collect();
    let s: Vec<f64> = (0..n).map(|i| mu[i] + delta[i]).collect();
    let mean = s.iter().sum::<f64>() / n as f64;
    let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    let p: Vec<f64> = s.iter().map(|v| expit((v - mean) / sd)).collect();

    let noise = Normal::new(0.0, cfg.sigma).expect("positive sd");
    let mut z = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut y2 = Vec::with_capacity(n);
    for i in 0..n {
        let zi = rng.random::<f64>() < p[i];
        z.push(zi);
        y1.push(mu[i] + noise.sample(&mut rng));
        y2.push(mu[i] + delta[i] + tau[i] * zi as u8 as f64 + noise.sample(&mut rng));
    }

    let ate = tau[..cfg.n_train].iter().sum::<f64>() / cfg.n_train as f64;
    let truth = Truth {
        mu: mu.clone(),
        delta: vec![delta],
        tau: vec![tau],
        propensity: vec![p.clone()],
        ate: vec![ate],
    };
    let build = |rows: std::ops::Range<usize>, prefix: &str| -> Result<PanelDataset> {
        let ids = rows.clone().map(|i| format!("{prefix}{}", i - rows.start + 1)).collect();
        let mut covs = Vec::with_capacity(20);
        for j in 0..10 {
            covs.push(Covariate::numeric(
                &format!("x{}", j + 1),
                1,
                rows.clone().map(|i| x1[i][j]).collect(),
            ));
        }
        for j in 0..10 {
            covs.push(Covariate::numeric(
                &format!("x{}", j + 11),
                2,
                rows.clone().map(|i| x2[i][j]).collect(),
            ));
        }
        PanelDataset::new(
            ids,
            vec![y1[rows.clone()].to_vec(), y2[rows.clone()].to_vec()],
            vec![rows.clone().map(|i| Some(z[i])).collect()],
            covs,
        )?
        .with_propensity(2, p[rows].to_vec())
    };

    let train = build(0..cfg.n_train, "")?;
    let mut truth_train = truth.rows(0..cfg.n_train);
    truth_train.ate = vec![ate];
    let test = if cfg.n_test > 0 {
        let mut t = truth.rows(cfg.n_train..n);
        t.ate = vec![t.tau[0].iter().sum::<f64>() / cfg.n_test as f64];
        Some((build(cfg.n_train..n, "test")?, t))
    } else {
        None
    };
    Ok(SimInstance {
        train,
        truth_train,
        test,
    })
}

/// Lag coefficients on `A_{t-1}` in the outcome at waves 1, 2, 3.
const DGP2_LAG: [f64; 3] = [0.0, 0.0, 0.5];

/// Three-wave process with time-varying confounding:
///
/// ```text
/// U ~ N(0, 1),  L_0 = A_0 = 0
/// L_t ~ N(1 + L_{t-1} + 0.5 A_{t-1} + U, 1)
/// A_t ~ Bernoulli(expit(1 + 0.1 L_t + 0.1 A_{t-1}))
/// Y_t ~ N(1 + A_t + g_t A_{t-1} + L_1 + ... + L_t + U, 1),  g = (0, 0, 0.5)
/// ```
///
/// for `t = 1, 2, 3`. `Y_t` is the wave-`t` outcome, `A_2` and `A_3` are the
/// treatments `z.2` and `z.3`, and `A_1` is a wave-1 covariate. `U` is not
/// observed. The direct effect of `A_t` on `Y_t` is 1 for every subject.
pub fn gen_dgp2(n: usize, seed: u64) -> Result<SimInstance> {
    if n < 2 {
        return Err(Error::Validation("need at least two rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = vec![[0.0; 3]; n];
    let mut a = vec![[false; 3]; n];
    let mut y = vec![[0.0; 3]; n];
    let mut p = vec![[0.0; 3]; n];
    for i in 0..n {
        let u: f64 = StandardNormal.sample(&mut rng);
        let (mut l_prev, mut a_prev) = (0.0, 0.0);
        let mut l_sum = 0.0;
        for t in 0..3 {
            let e: f64 = StandardNormal.sample(&mut rng);
            let lt = 1.0 + l_prev + 0.5 * a_prev + u + e;
            let pt = expit(1.0 + 0.1 * lt + 0.1 * a_prev);
            let at = rng.random::<f64>() < pt;
            l_sum += lt;
            let e: f64 = StandardNormal.sample(&mut rng);
            let at_f = at as u8 as f64;
            y[i][t] = 1.0 + at_f + DGP2_LAG[t] * a_prev + l_sum + u + e;
            l[i][t] = lt;
            a[i][t] = at;
            p[i][t] = pt;
            l_prev = lt;
            a_prev = at_f;
        }
    }
    let ids = (1..=n).map(|i| i.to_string()).collect();
    let col = |f: &dyn Fn(usize) -> f64| (0..n).map(f).collect::<Vec<f64>>();
    let covs = vec![
        Covariate::numeric("l", 1, col(&|i| l[i][0])),
        Covariate::numeric("a", 1, col(&|i| a[i][0] as u8 as f64)),
        Covariate::numeric("l", 2, col(&|i| l[i][1])),
        Covariate::numeric("l", 3, col(&|i| l[i][2])),
    ];
    let train = PanelDataset::new(
        ids,
        (0..3).map(|t| col(&|i| y[i][t])).collect(),
        (1..3)
            .map(|t| (0..n).map(|i| Some(a[i][t])).collect())
            .collect(),
        covs,
    )?;
    let nan = vec![vec![f64::NAN; n]; 2];
    let truth = Truth {
        mu: vec![f64::NAN; n],
        delta: nan,
        tau: vec![vec![1.0; n]; 2],
        propensity: (1..3).map(|t| col(&|i| p[i][t])).collect(),
        ate: vec![1.0, 1.0],
    };
    Ok(SimInstance {
        train,
        truth_train: truth,
        test: None,
    })
}
