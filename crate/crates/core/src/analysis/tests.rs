use std::sync::OnceLock;

use proptest::prelude::*;

use super::*;
use crate::model::{fit, FitOptions, HyperParams, PropensityInput};
use crate::propensity::PropensityMethod;
use crate::sim::{gen_dgp1, Dgp1Config};
use crate::tree::{Direction, Forest, NodeRecord, Tree};

fn tiny() -> &'static PosteriorDraws {
    static DRAWS: OnceLock<PosteriorDraws> = OnceLock::new();
    DRAWS.get_or_init(|| {
        let cfg = Dgp1Config {
            n_train: 40,
            n_test: 0,
            ..Dgp1Config::default()
        };
        let sim = gen_dgp1(&cfg, 5).unwrap();
        let hp = HyperParams::default().with_trees(4, 3, 2).with_iterations(3, 6);
        let opts = FitOptions {
            propensity: PropensityInput::Estimate(PropensityMethod::Logistic),
            ..FitOptions::default()
        };
        fit(&sim.train, &hp, &opts).unwrap()
    })
}

/// `tiny()` with every draw's tau replaced by `tau(draw, subject)`.
fn with_tau(tau: impl Fn(usize, usize) -> f64) -> PosteriorDraws {
    let mut d = tiny().clone();
    for (k, draw) in d.draws.iter_mut().enumerate() {
        for (i, v) in draw.tau[0].iter_mut().enumerate() {
            *v = tau(k, i);
        }
    }
    d
}

#[test]
fn type7_quantiles() {
    let x = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(quantile(&x, 0.0), 1.0);
    assert_eq!(quantile(&x, 0.25), 1.75);
    assert_eq!(quantile(&x, 0.5), 2.5);
    assert_eq!(quantile(&x, 1.0), 4.0);
    assert_eq!(quantile(&[7.0], 0.3), 7.0);
}

#[test]
fn constant_effect_gives_constant_ate() {
    let d = with_tau(|_, _| -0.08);
    let ate = ate_posterior(&d, None, 2).unwrap();
    assert_eq!(ate.len(), d.len());
    assert!(ate.iter().all(|v| (v + 0.08).abs() < 1e-15));
    let s = summarize_effects(&d, 0.95).unwrap();
    for iv in &s.wave(2).unwrap().tau {
        assert!((iv.lo + 0.08).abs() < 1e-15 && (iv.hi + 0.08).abs() < 1e-15);
    }
}

#[test]
fn weighted_average_of_two_subjects() {
    let d = with_tau(|_, i| if i == 0 { -0.1 } else { 0.1 });
    let mut w = vec![0.0; d.meta.subjects.len()];
    w[0] = 3.0;
    w[1] = 1.0;
    for v in ate_posterior(&d, Some(&w), 2).unwrap() {
        assert!((v + 0.05).abs() < 1e-15, "{v}");
    }
}

#[test]
fn equal_weights_match_plain_mean() {
    let d = tiny();
    let n = d.meta.subjects.len();
    let ate = ate_posterior(d, Some(&vec![2.5; n]), 2).unwrap();
    for (v, draw) in ate.iter().zip(&d.draws) {
        let plain = draw.tau(2).iter().sum::<f64>() / n as f64;
        assert!((v - plain).abs() < 1e-12);
    }
}

#[test]
fn bad_wave_and_weights_are_rejected() {
    let d = tiny();
    assert!(ate_posterior(d, None, 1).is_err());
    assert!(ate_posterior(d, None, 3).is_err());
    let n = d.meta.subjects.len();
    assert!(ate_posterior(d, Some(&vec![0.0; n]), 2).is_err());
    assert!(ate_posterior(d, Some(&vec![-1.0; n]), 2).is_err());
    assert!(ate_posterior(d, Some(&[1.0]), 2).is_err());
    assert!(summarize_effects(d, 1.0).is_err());
}

#[test]
fn symmetric_draws_centre_on_zero() {
    let d = with_tau(|k, _| [-1.0, 0.0, 1.0][k % 3]);
    let s = summarize_effects(&d, 0.95).unwrap();
    for iv in &s.wave(2).unwrap().tau {
        assert!(iv.mean.abs() < 1e-15);
        assert!(iv.lo >= -1.0 && iv.hi <= 1.0);
    }
}

#[test]
fn summary_needs_two_draws() {
    let mut d = tiny().clone();
    d.draws.truncate(1);
    assert!(summarize_effects(&d, 0.95).is_err());
}

#[test]
fn ate_sample_matches_summary() {
    let d = tiny();
    let s = summarize_effects(d, 0.9).unwrap();
    assert_eq!(s.wave(2).unwrap().ate, ate_posterior(d, None, 2).unwrap());
    assert_eq!(s.n_draws(), d.len());
}

fn tree(records: &[NodeRecord]) -> Tree {
    Tree::from_records(ForestKind::Tau(2), records).unwrap()
}

#[test]
fn importance_counts_splits() {
    let mut d = tiny().clone();
    let split = |feature| NodeRecord::Split {
        feature,
        threshold: 0.5,
        missing_goes: Direction::Left,
    };
    let leaf = NodeRecord::Leaf { value: 0.0 };
    let n_tau = d.draws[0].forest(ForestKind::Tau(2)).unwrap().len();
    let mut trees = vec![tree(&[split(2), leaf, split(2), leaf, leaf])];
    trees.extend((1..n_tau).map(|_| Tree::stump(ForestKind::Tau(2))));
    for draw in &mut d.draws {
        let k = draw.forests.iter().position(|f| f.kind() == ForestKind::Tau(2)).unwrap();
        draw.forests[k] = Forest::new(ForestKind::Tau(2), trees.clone()).unwrap();
    }
    let imp = variable_importance(&d, ForestKind::Tau(2)).unwrap();
    let names: Vec<&str> = d.meta.schema.forest(ForestKind::Tau(2)).unwrap().columns.iter().map(|c| c.group()).collect();
    assert_eq!(imp.len(), names.len());
    for (k, v) in imp.iter().enumerate() {
        assert_eq!(v.name, names[k]);
        assert_eq!(v.splits, if k == 2 { 2.0 } else { 0.0 });
    }

    for draw in &mut d.draws {
        for f in &mut draw.forests {
            *f = Forest::stumps(f.kind(), f.len());
        }
    }
    let imp = variable_importance(&d, ForestKind::Mu).unwrap();
    assert!(imp.iter().all(|v| v.splits == 0.0));
}

#[test]
fn importance_rejects_unknown_forests() {
    let d = tiny();
    for kind in [ForestKind::Tau(3), ForestKind::Propensity(2), ForestKind::Difference(2)] {
        assert!(matches!(variable_importance(d, kind), Err(Error::UnknownForest(_))));
    }
}

#[test]
fn delta_spread_matches_direct_sd() {
    let d = tiny();
    let s = summarize_effects(d, 0.95).unwrap();
    let means = s.wave(2).unwrap().delta_means();
    let n = means.len() as f64;
    let m = means.iter().sum::<f64>() / n;
    let sd = (means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
    let got = delta_spread(&s, 2).unwrap();
    assert!((got.unweighted - sd).abs() < 1e-12);
    assert!((got.weighted - sd).abs() < 1e-12);
}

#[test]
fn pooling_and_chain_order() {
    let a = tiny().clone();
    let mut b = tiny().clone();
    b.meta.chains[0].chain = 1;
    b.meta.chains[0].seed += 1;
    for d in &mut b.draws {
        d.chain = 1;
        for v in &mut d.tau[0] {
            *v += 1.0;
        }
    }
    assert_eq!(pool_chains(vec![a.clone()]).unwrap(), a);
    let ab = pool_chains(vec![a.clone(), b.clone()]).unwrap();
    let ba = pool_chains(vec![b, a.clone()]).unwrap();
    assert_eq!(ab.len(), 2 * a.len());
    let (sa, sb) = (summarize_effects(&ab, 0.95).unwrap(), summarize_effects(&ba, 0.95).unwrap());
    for (x, y) in sa.wave(2).unwrap().tau.iter().zip(&sb.wave(2).unwrap().tau) {
        assert!((x.mean - y.mean).abs() < 1e-12);
        assert_eq!((x.lo, x.hi), (y.lo, y.hi));
    }

    let mut other = a.clone();
    other.meta.hyper.n_tau += 1;
    assert!(pool_chains(vec![a, other]).is_err());
}

#[test]
fn exports_have_headers_and_config() {
    let d = tiny();
    let s = summarize_effects(d, 0.95).unwrap();
    let mut buf = Vec::new();
    write_effects_csv(&mut buf, &s, Some("lbcf test")).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# lbcf test"));
    assert!(lines.next().unwrap().starts_with("subject_id,wave,present,tau_mean"));
    assert_eq!(text.lines().count(), 2 + s.ids.len());

    let mut buf = Vec::new();
    write_ate_csv(&mut buf, &s, None).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + d.len());

    let mut buf = Vec::new();
    write_histogram(&mut buf, &[0.0, 0.1, 0.9, 1.0], 2, None).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "# center count\n0.25 2\n0.75 2\n");

    let report = build_report(d, &s, serde_json::json!({"seed": 1})).unwrap();
    assert_eq!(report.ate.len(), 1);
    assert!(report.importance.contains_key("tau.2"));
    assert!(!report.importance.contains_key("propensity.2"));
    let mut buf = Vec::new();
    write_report(&mut buf, &report).unwrap();
    let back: Report = serde_json::from_slice(&buf).unwrap();
    assert_eq!(back, report);
}

proptest! {
    #[test]
    fn ate_ignores_weight_scale(
        tau in prop::collection::vec(-5.0f64..5.0, 1..30),
        w in prop::collection::vec(0.01f64..10.0, 30),
        c in 0.001f64..1000.0,
    ) {
        let w = &w[..tau.len()];
        let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
        let a = weighted_mean(&tau, w, |_| true);
        let b = weighted_mean(&tau, &scaled, |_| true);
        prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
    }

    #[test]
    fn intervals_nest_and_bracket_the_mean(
        x in prop::collection::vec(-1e3f64..1e3, 2..200),
    ) {
        let i95 = interval(&x, 0.95);
        let i99 = interval(&x, 0.99);
        prop_assert!(i95.lo <= i95.mean && i95.mean <= i95.hi);
        prop_assert!(i99.lo <= i95.lo && i95.hi <= i99.hi);
    }
}
