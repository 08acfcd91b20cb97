use std::sync::OnceLock;

use stockcast::ensemble::{self, EnsembleBundle, LearnerKind, TrainParams, WeightVector};
use stockcast::eval::{self, BenchmarkConfig, EvalReport, Model, SynthMarketParams, WeightMode};
use stockcast::features::{self, FeatureConfig};
use stockcast::market::{self, MarketPanel, SplitSpec};
use stockcast::Error;

fn panel() -> &'static MarketPanel {
    static PANEL: OnceLock<MarketPanel> = OnceLock::new();
    PANEL.get_or_init(|| {
        eval::generate_synth_market(&SynthMarketParams {
            company_count: 3,
            ..Default::default()
        })
        .unwrap()
    })
}

fn quick_params() -> TrainParams {
    let mut p = TrainParams::default();
    p.lm.max_epochs = 40;
    p.cs.max_iters = 60;
    p
}

fn report() -> &'static EvalReport {
    static REPORT: OnceLock<EvalReport> = OnceLock::new();
    REPORT.get_or_init(|| eval::run_benchmark(panel(), &BenchmarkConfig::default(), &quick_params()).unwrap())
}

#[test]
fn daily_and_weekly_sample_counts() {
    let p = panel();
    let c = &p.companies[0];
    let daily = features::build_dataset(p, c, &FeatureConfig::daily()).unwrap();
    let weekly = features::build_dataset(p, c, &FeatureConfig::weekly()).unwrap();
    assert_eq!(FeatureConfig::daily().warmup(), 25);
    assert_eq!(daily.len(), 503 - 25 - 1);
    assert_eq!(weekly.len(), 503 - FeatureConfig::weekly().warmup() - 7);
    let same_lags_weekly = FeatureConfig {
        horizon: 7,
        ..FeatureConfig::daily()
    };
    assert_eq!(daily.len() - features::build_dataset(p, c, &same_lags_weekly).unwrap().len(), 6);
    let parts = market::split(&daily, &SplitSpec::default()).unwrap();
    assert_eq!((parts.train.len(), parts.validation.len(), parts.test.len()), (321, 81, 75));
}

#[test]
fn forecast_matches_hand_traced_pipeline() {
    let p = panel();
    let cfg = FeatureConfig::daily();
    let params = quick_params();
    let run = ensemble::train_ensemble(p, "C02", &cfg, &params).unwrap();
    let bundle = &run.bundle;

    // Rebuild the training block and its ranges independently.
    let data = features::build_dataset(p, p.company("C02").unwrap(), &cfg).unwrap();
    let parts = market::split(&data, &params.split).unwrap();
    let train = parts.train.samples();
    let range = |f: &dyn Fn(&features::FeatureSample) -> f64| {
        train.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)))
    };
    let (tmin, tmax) = range(&|s| s.target);

    for sample in run.test.samples().iter().take(10) {
        let x: Vec<f64> = (0..cfg.feature_len())
            .map(|j| {
                let (lo, hi) = range(&|s| s.features[j]);
                if hi > lo {
                    ((sample.features[j] - lo) / (hi - lo)).clamp(0.0, 1.0)
                } else {
                    0.5
                }
            })
            .collect();
        let denorm = |u: f64| tmin + u * (tmax - tmin);
        let w = bundle.ann.forward(&x).unwrap();
        let xx = bundle.cart.predict(&x).unwrap();
        let y = bundle.gpr.predict_mean(&x).unwrap();
        let (pw, px, py) = (denorm(w), denorm(xx), denorm(y));
        let WeightVector { a, b, c } = bundle.weights;
        let oracle = (a * pw + b * px + c * py) / (a + b + c);

        let f = bundle.forecast(&sample.features).unwrap();
        assert!((f.ann - pw).abs() <= 1e-9 * pw.abs());
        assert!((f.cart - px).abs() <= 1e-9 * px.abs());
        assert!((f.gpr - py).abs() <= 1e-9 * py.abs());
        assert!((f.ensemble - oracle).abs() <= 1e-9 * oracle.abs(), "{} vs {oracle}", f.ensemble);
        assert_eq!(ensemble::ensemble_predict(bundle, &sample.features).unwrap(), f.ensemble);
    }
    assert!(ensemble::ensemble_predict(bundle, &[1.0, 2.0]).is_err());
}

#[test]
fn bundle_round_trip_and_determinism() {
    let p = panel();
    let cfg = FeatureConfig::weekly();
    let params = quick_params();
    let first = ensemble::train_ensemble(p, "C03", &cfg, &params).unwrap();
    let second = ensemble::train_ensemble(p, "C03", &cfg, &params).unwrap();
    let mut a = first.bundle.clone();
    let mut b = second.bundle.clone();
    a.provenance.created_at.clear();
    b.provenance.created_at.clear();
    assert_eq!(a, b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("C03.bundle.json");
    first.bundle.save(&path).unwrap();
    let loaded = EnsembleBundle::load(&path).unwrap();
    assert_eq!(loaded.weights, first.bundle.weights);
    for s in first.test.samples() {
        let x = first.bundle.forecast(&s.features).unwrap();
        let y = loaded.forecast(&s.features).unwrap();
        for k in LearnerKind::ALL {
            assert!((x.get(k) - y.get(k)).abs() <= 1e-9);
        }
        assert!((x.ensemble - y.ensemble).abs() <= 1e-9);
    }
}

#[test]
fn bundle_rejects_foreign_major_version() {
    let run = ensemble::train_ensemble(panel(), "C01", &FeatureConfig::daily(), &quick_params()).unwrap();
    let json = run.bundle.to_json().unwrap().replacen("\"1.0\"", "\"2.0\"", 1);
    assert!(matches!(EnsembleBundle::from_json(&json), Err(Error::BundleVersion { .. })));
}

#[test]
fn unknown_company_is_a_stage_error() {
    let err = ensemble::train_ensemble(panel(), "XYZ", &FeatureConfig::daily(), &quick_params()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("data") && msg.contains("C01"), "{msg}");
}

#[test]
fn report_shape_and_aggregation() {
    let r = report();
    assert!(r.failures.is_empty());
    assert_eq!(r.results.len(), 3 * 2);
    assert!(r.passed());
    for h in ["daily", "weekly"] {
        let rows: Vec<_> = r.results.iter().filter(|x| x.horizon == h).collect();
        for m in Model::ALL {
            let mean = rows.iter().map(|x| x.test.get(m).mae).sum::<f64>() / rows.len() as f64;
            let agg = r.aggregate(h, m).unwrap();
            assert!((agg.mae - mean).abs() <= 1e-12 * mean);
        }
    }
    for row in &r.results {
        assert!(row.validation_rmse.ensemble <= row.validation_rmse.best_single());
        let w = row.weights.to_array();
        assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn emitted_files_conserve_counts() {
    let r = report();
    let dir = tempfile::tempdir().unwrap();
    eval::emit_report(r, dir.path()).unwrap();
    let predictions: usize = r.results.iter().map(|x| x.predictions.len()).sum();
    for m in Model::ALL {
        let reg = std::fs::read_to_string(dir.path().join(format!("plots/regression_{}.csv", m.name()))).unwrap();
        assert_eq!(reg.lines().count() - 1, predictions);
        let hist = std::fs::read_to_string(dir.path().join(format!("plots/residual_hist_{}.csv", m.name()))).unwrap();
        for h in ["daily", "weekly"] {
            let total: usize = hist
                .lines()
                .skip(1)
                .filter(|l| l.starts_with(h))
                .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
                .sum();
            let expected: usize = r.results.iter().filter(|x| x.horizon == h).map(|x| x.predictions.len()).sum();
            assert_eq!(total, expected);
            assert_eq!(hist.lines().filter(|l| l.starts_with(h)).count(), eval::HISTOGRAM_BINS);
        }
    }
    let table = std::fs::read_to_string(dir.path().join("tables/error_rate_weekly.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 3 + 1);
    let conv = std::fs::read_to_string(dir.path().join("plots/cs_convergence.csv")).unwrap();
    let iters: usize = r.results.iter().map(|x| x.cs_history.len()).sum();
    assert_eq!(conv.lines().count() - 1, iters);
}

#[test]
fn forced_corner_weights_reduce_to_a_learner() {
    let cfg = BenchmarkConfig {
        force_weights: Some(WeightVector::corner(LearnerKind::Ann)),
        companies: vec!["C01".into()],
        ..Default::default()
    };
    let r = eval::run_benchmark(panel(), &cfg, &quick_params()).unwrap();
    assert_eq!(r.results.len(), 2);
    for row in &r.results {
        for p in &row.predictions {
            assert_eq!(p.ensemble, p.ann);
        }
        assert_eq!(row.test.ensemble, row.test.ann);
    }
    assert!(r.gates.iter().all(|g| g.name != "corner_dominance"));
}

#[test]
fn pooled_mode_shares_one_weight_vector() {
    let cfg = BenchmarkConfig {
        weight_mode: WeightMode::Pooled,
        ..Default::default()
    };
    let r = eval::run_benchmark(panel(), &cfg, &quick_params()).unwrap();
    for h in ["daily", "weekly"] {
        let ws: Vec<_> = r.results.iter().filter(|x| x.horizon == h).map(|x| x.weights).collect();
        assert_eq!(ws.len(), 3);
        assert!(ws.iter().all(|w| *w == ws[0]));
    }
    assert!(r.gates.iter().any(|g| g.name == "corner_dominance" && g.passed));
}

#[test]
fn broken_learner_marks_companies_failed() {
    let cfg = BenchmarkConfig {
        inject_nan_learner: Some(LearnerKind::Gpr),
        companies: vec!["C01".into(), "C02".into()],
        ..Default::default()
    };
    let r = eval::run_benchmark(panel(), &cfg, &quick_params()).unwrap();
    assert_eq!(r.failures.len(), 4);
    assert!(r.results.is_empty());
    assert!(!r.passed());
    assert!(r.failures.iter().all(|f| f.error.contains("non-finite")));
}

#[test]
fn missing_company_is_reported_not_dropped() {
    let cfg = BenchmarkConfig {
        companies: vec!["C01".into(), "MISSING".into()],
        ..Default::default()
    };
    let r = eval::run_benchmark(panel(), &cfg, &quick_params()).unwrap();
    assert_eq!(r.results.len(), 2);
    assert_eq!(r.failures.len(), 2);
    assert!(r.failures.iter().all(|f| f.company == "MISSING"));
}
