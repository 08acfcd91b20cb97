//! Error metrics, a synthetic sector market, and the benchmark that trains and
//! scores every company at daily and weekly horizons.

use std::fmt::Write as _;
use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cuckoo::IterationStats;
use crate::ensemble::{self, LearnerKind, LearnerOutputs, TrainParams, WeightVector};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::market::{self, MarketPanel, PriceSeries};

fn check_pair(pred: &[f64], actual: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Validation("metric over an empty vector".into()));
    }
    if pred.len() != actual.len() {
        return Err(Error::DimensionMismatch {
            expected: actual.len(),
            actual: pred.len(),
        });
    }
    Ok(())
}

pub fn rmse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_pair(pred, actual)?;
    let s: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_pair(pred, actual)?;
    let s: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Mean of `|pred - actual| / actual`.
pub fn error_rate(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_pair(pred, actual)?;
    if let Some(bad) = actual.iter().find(|a| a.is_nan() || **a <= 0.0) {
        return Err(Error::Validation(format!("error rate needs positive actual prices, got {bad}")));
    }
    let s: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a).abs() / a).sum();
    Ok(s / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub error_rate: f64,
    pub mae: f64,
    pub rmse: f64,
}

impl Metrics {
    pub fn compute(pred: &[f64], actual: &[f64]) -> Result<Self> {
        Ok(Self {
            error_rate: error_rate(pred, actual)?,
            mae: mae(pred, actual)?,
            rmse: rmse(pred, actual)?,
        })
    }

    fn mean(items: &[Metrics]) -> Self {
        let n = items.len() as f64;
        Self {
            error_rate: items.iter().map(|m| m.error_rate).sum::<f64>() / n,
            mae: items.iter().map(|m| m.mae).sum::<f64>() / n,
            rmse: items.iter().map(|m| m.rmse).sum::<f64>() / n,
        }
    }

    fn is_consistent(&self) -> bool {
        let finite = self.error_rate.is_finite() && self.mae.is_finite() && self.rmse.is_finite();
        finite && self.error_rate >= 0.0 && self.mae >= 0.0 && self.rmse >= self.mae * (1.0 - 1e-12)
    }
}

/// The four evaluated forecasters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Ensemble,
    Ann,
    Cart,
    Gpr,
}

impl Model {
    pub const ALL: [Model; 4] = [Model::Ensemble, Model::Ann, Model::Cart, Model::Gpr];

    pub fn name(self) -> &'static str {
        match self {
            Model::Ensemble => "ensemble",
            Model::Ann => "ann",
            Model::Cart => "cart",
            Model::Gpr => "gpr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub ensemble: Metrics,
    pub ann: Metrics,
    pub cart: Metrics,
    pub gpr: Metrics,
}

impl ModelMetrics {
    pub fn get(&self, model: Model) -> &Metrics {
        match model {
            Model::Ensemble => &self.ensemble,
            Model::Ann => &self.ann,
            Model::Cart => &self.cart,
            Model::Gpr => &self.gpr,
        }
    }

    fn from_fn(mut f: impl FnMut(Model) -> Result<Metrics>) -> Result<Self> {
        Ok(Self {
            ensemble: f(Model::Ensemble)?,
            ann: f(Model::Ann)?,
            cart: f(Model::Cart)?,
            gpr: f(Model::Gpr)?,
        })
    }
}

/// Held-out forecast for one anchor date.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub anchor_date: NaiveDate,
    pub actual: f64,
    pub ensemble: f64,
    pub ann: f64,
    pub cart: f64,
    pub gpr: f64,
}

impl PredictionRow {
    pub fn get(&self, model: Model) -> f64 {
        match model {
            Model::Ensemble => self.ensemble,
            Model::Ann => self.ann,
            Model::Cart => self.cart,
            Model::Gpr => self.gpr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompanyReport {
    pub company: String,
    pub horizon: String,
    pub horizon_days: usize,
    pub weights: WeightVector,
    pub validation_rmse: ModelMetricsRmse,
    pub test: ModelMetrics,
    pub predictions: Vec<PredictionRow>,
    pub cs_history: Vec<IterationStats>,
}

/// Validation RMSE of each forecaster on the block the weights were fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelMetricsRmse {
    pub ensemble: f64,
    pub ann: f64,
    pub cart: f64,
    pub gpr: f64,
}

impl ModelMetricsRmse {
    pub fn best_single(&self) -> f64 {
        self.ann.min(self.cart).min(self.gpr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompanyFailure {
    pub company: String,
    pub horizon: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub horizon: String,
    pub model: Model,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub name: String,
    pub passed: bool,
    /// Soft gates only warn.
    pub hard: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub results: Vec<CompanyReport>,
    pub failures: Vec<CompanyFailure>,
    pub aggregates: Vec<AggregateRow>,
    pub gates: Vec<GateResult>,
}

impl EvalReport {
    /// True when no company failed and every hard gate passed.
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.gates.iter().all(|g| g.passed || !g.hard)
    }

    pub fn aggregate(&self, horizon: &str, model: Model) -> Option<&Metrics> {
        self.aggregates
            .iter()
            .find(|r| r.horizon == horizon && r.model == model)
            .map(|r| &r.metrics)
    }

    pub fn horizons(&self) -> Vec<String> {
        let mut hs: Vec<String> = Vec::new();
        for r in &self.results {
            if !hs.contains(&r.horizon) {
                hs.push(r.horizon.clone());
            }
        }
        hs
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A one-day log-return shock applied to every company.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shock {
    /// Trading-day index.
    pub day: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthMarketParams {
    pub company_count: usize,
    pub record_count: usize,
    pub seed: u64,
    pub start_date: NaiveDate,
    pub market_start: f64,
    /// Daily drift of the market index's log price.
    pub market_drift: f64,
    pub market_volatility: f64,
    /// Volatility the sector factor adds on top of the market return.
    pub sector_volatility: f64,
    /// Loading of each company on the sector factor.
    pub sector_coupling: f64,
    pub idiosyncratic_volatility: f64,
    pub shocks: Vec<Shock>,
}

impl Default for SynthMarketParams {
    fn default() -> Self {
        Self {
            company_count: 10,
            record_count: 503,
            seed: 7,
            start_date: NaiveDate::from_ymd_opt(2021, 1, 4).expect("valid date"),
            market_start: 1000.0,
            market_drift: 2e-4,
            market_volatility: 0.01,
            sector_volatility: 0.008,
            sector_coupling: 0.8,
            idiosyncratic_volatility: 0.012,
            shocks: vec![
                Shock { day: 260, magnitude: -0.06 },
                Shock { day: 262, magnitude: 0.03 },
                Shock { day: 430, magnitude: 0.05 },
            ],
        }
    }
}

impl SynthMarketParams {
    pub fn validate(&self) -> Result<()> {
        if self.company_count == 0 || self.record_count == 0 {
            return Err(Error::InvalidParameter("company_count and record_count must be positive".into()));
        }
        let vols = [self.market_volatility, self.sector_volatility, self.idiosyncratic_volatility];
        if vols.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter("volatilities must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.sector_coupling) {
            return Err(Error::InvalidParameter("sector_coupling must lie in [0, 1]".into()));
        }
        if !(self.market_start.is_finite() && self.market_start > 0.0) || !self.market_drift.is_finite() {
            return Err(Error::InvalidParameter("market_start must be positive and drift finite".into()));
        }
        Ok(())
    }
}

fn trading_days(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(count);
    let mut d = start;
    while out.len() < count {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().expect("date in range");
    }
    out
}

/// Market index as a geometric random walk; each company's log-return is its
/// coupling times a sector factor (market return plus sector noise), plus
/// idiosyncratic noise and any scheduled shock. The sector index is the
/// companies' equal-weighted mean.
pub fn generate_synth_market(params: &SynthMarketParams) -> Result<MarketPanel> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let n = params.record_count;
    let dates = trading_days(params.start_date, n);

    let sm = params.market_volatility;
    let mut market_returns = Vec::with_capacity(n);
    let mut sector_factor = Vec::with_capacity(n);
    for _ in 0..n {
        let rm = params.market_drift - 0.5 * sm * sm + sm * normal();
        market_returns.push(rm);
        sector_factor.push(rm + params.sector_volatility * normal());
    }
    let shock_at = |t: usize| params.shocks.iter().filter(|s| s.day == t).map(|s| s.magnitude).sum::<f64>();

    let mut market = Vec::with_capacity(n);
    let mut level = params.market_start;
    for (t, r) in market_returns.iter().enumerate() {
        if t > 0 {
            level *= r.exp();
        }
        market.push(level);
    }

    let mut companies = Vec::with_capacity(params.company_count);
    for c in 0..params.company_count {
        let start = 20.0 * (1.0 + c as f64) + 30.0 * normal().abs();
        let mut price = start;
        let mut closes = Vec::with_capacity(n);
        for (t, factor) in sector_factor.iter().enumerate() {
            if t > 0 {
                let r = params.sector_coupling * factor + params.idiosyncratic_volatility * normal() + shock_at(t);
                price *= r.exp();
            }
            closes.push(price);
        }
        companies.push(PriceSeries::new(format!("C{:02}", c + 1), dates.clone(), closes)?);
    }
    let sector_index = market::derive_sector_index(&companies)?;
    Ok(MarketPanel {
        market_index: PriceSeries::new("MARKET", dates, market)?,
        sector_index,
        companies,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// One weight search per company.
    #[default]
    PerCompany,
    /// One weight search over all companies' validation outputs.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub daily: FeatureConfig,
    pub weekly: FeatureConfig,
    pub weight_mode: WeightMode,
    /// Replace the optimized weights (e.g. a corner vector) for diagnostics.
    pub force_weights: Option<WeightVector>,
    /// Make one learner emit NaN at test time; exercises the failure path.
    pub inject_nan_learner: Option<LearnerKind>,
    /// Optional subset of company symbols; all when empty.
    pub companies: Vec<String>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            daily: FeatureConfig::daily(),
            weekly: FeatureConfig::weekly(),
            weight_mode: WeightMode::PerCompany,
            force_weights: None,
            inject_nan_learner: None,
            companies: Vec::new(),
        }
    }
}

struct CompanyRun {
    company: String,
    run: ensemble::TrainingRun,
}

fn validation_rmse(outputs: &LearnerOutputs, weights: &WeightVector) -> Result<ModelMetricsRmse> {
    Ok(ModelMetricsRmse {
        ensemble: outputs.rmse(weights)?,
        ann: outputs.rmse(&WeightVector::corner(LearnerKind::Ann))?,
        cart: outputs.rmse(&WeightVector::corner(LearnerKind::Cart))?,
        gpr: outputs.rmse(&WeightVector::corner(LearnerKind::Gpr))?,
    })
}

fn evaluate_company(cr: &CompanyRun, horizon: &str, cfg: &BenchmarkConfig) -> Result<CompanyReport> {
    let bundle = &cr.run.bundle;
    let mut rows = Vec::with_capacity(cr.run.test.len());
    for s in cr.run.test.samples() {
        let mut f = bundle.forecast(&s.features)?;
        if let Some(kind) = cfg.inject_nan_learner {
            match kind {
                LearnerKind::Ann => f.ann = f64::NAN,
                LearnerKind::Cart => f.cart = f64::NAN,
                LearnerKind::Gpr => f.gpr = f64::NAN,
            }
            f.ensemble = ensemble::combine(&bundle.weights, f.ann, f.cart, f.gpr)?;
        }
        rows.push(PredictionRow {
            anchor_date: s.anchor_date,
            actual: s.target,
            ensemble: f.ensemble,
            ann: f.ann,
            cart: f.cart,
            gpr: f.gpr,
        });
    }
    if rows.is_empty() {
        return Err(Error::Validation("empty test block".into()));
    }
    for m in Model::ALL {
        if rows.iter().any(|r| !r.get(m).is_finite()) {
            return Err(Error::Validation(format!("{} produced non-finite test predictions", m.name())));
        }
    }
    let actual: Vec<f64> = rows.iter().map(|r| r.actual).collect();
    let test = ModelMetrics::from_fn(|m| {
        let pred: Vec<f64> = rows.iter().map(|r| r.get(m)).collect();
        Metrics::compute(&pred, &actual)
    })?;
    Ok(CompanyReport {
        company: cr.company.clone(),
        horizon: horizon.to_string(),
        horizon_days: bundle.feature_config.horizon,
        weights: bundle.weights,
        validation_rmse: validation_rmse(&cr.run.validation, &bundle.weights)?,
        test,
        predictions: rows,
        cs_history: cr.run.search.history.clone(),
    })
}

fn train_all(panel: &MarketPanel, symbols: &[String], config: &FeatureConfig, params: &TrainParams) -> Vec<(String, Result<ensemble::TrainingRun>)> {
    std::thread::scope(|s| {
        let jobs: Vec<_> = symbols
            .iter()
            .map(|sym| (sym.clone(), s.spawn(move || ensemble::train_ensemble(panel, sym, config, params))))
            .collect();
        jobs.into_iter()
            .map(|(sym, h)| (sym, h.join().expect("training thread panicked")))
            .collect()
    })
}

/// Trains and evaluates every company at the daily and weekly horizons, then
/// averages per model and checks the invariant gates.
pub fn run_benchmark(panel: &MarketPanel, cfg: &BenchmarkConfig, params: &TrainParams) -> Result<EvalReport> {
    params.validate()?;
    if !panel.is_aligned() {
        return Err(Error::Alignment("benchmark panel must be aligned".into()));
    }
    let symbols: Vec<String> = if cfg.companies.is_empty() {
        panel.symbols().iter().map(|s| s.to_string()).collect()
    } else {
        cfg.companies.clone()
    };
    if let Some(w) = &cfg.force_weights {
        w.validate()?;
        ensemble::combine(w, 1.0, 1.0, 1.0)?;
    }

    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut pooled_checks = Vec::new();
    for (horizon, config) in [("daily", &cfg.daily), ("weekly", &cfg.weekly)] {
        let mut runs = Vec::new();
        for (company, outcome) in train_all(panel, &symbols, config, params) {
            match outcome {
                Ok(run) => runs.push(CompanyRun { company, run }),
                Err(e) => failures.push(CompanyFailure {
                    company,
                    horizon: horizon.to_string(),
                    error: e.to_string(),
                }),
            }
        }
        if cfg.weight_mode == WeightMode::Pooled && !runs.is_empty() {
            let parts: Vec<LearnerOutputs> = runs.iter().map(|r| r.run.validation.clone()).collect();
            let pooled = LearnerOutputs::concat(&parts);
            match ensemble::optimize_weights(&pooled, &crate::cuckoo::CsParams { seed: params.seed, ..params.cs.clone() }) {
                Ok((w, search)) => {
                    for r in &mut runs {
                        r.run.bundle.weights = w;
                        r.run.search = search.clone();
                    }
                    pooled_checks.push((horizon, validation_rmse(&pooled, &w)?));
                }
                Err(e) => {
                    for r in runs.drain(..) {
                        failures.push(CompanyFailure {
                            company: r.company,
                            horizon: horizon.to_string(),
                            error: format!("pooled weights: {e}"),
                        });
                    }
                }
            }
        }
        for mut r in runs {
            if let Some(w) = cfg.force_weights {
                r.run.bundle.weights = w;
            }
            match evaluate_company(&r, horizon, cfg) {
                Ok(rep) => results.push(rep),
                Err(e) => failures.push(CompanyFailure {
                    company: r.company,
                    horizon: horizon.to_string(),
                    error: e.to_string(),
                }),
            }
        }
    }

    let mut aggregates = Vec::new();
    for horizon in ["daily", "weekly"] {
        let rows: Vec<&CompanyReport> = results.iter().filter(|r| r.horizon == horizon).collect();
        if rows.is_empty() {
            continue;
        }
        for m in Model::ALL {
            let items: Vec<Metrics> = rows.iter().map(|r| *r.test.get(m)).collect();
            aggregates.push(AggregateRow {
                horizon: horizon.to_string(),
                model: m,
                metrics: Metrics::mean(&items),
            });
        }
    }

    let gates = evaluate_gates(&results, &failures, &pooled_checks, cfg);
    Ok(EvalReport {
        results,
        failures,
        aggregates,
        gates,
    })
}

fn evaluate_gates(results: &[CompanyReport], failures: &[CompanyFailure], pooled: &[(&str, ModelMetricsRmse)], cfg: &BenchmarkConfig) -> Vec<GateResult> {
    let mut gates = Vec::new();

    gates.push(GateResult {
        name: "all_companies_evaluated".into(),
        passed: failures.is_empty(),
        hard: true,
        detail: if failures.is_empty() {
            format!("{} company/horizon runs", results.len())
        } else {
            failures.iter().map(|f| format!("{}/{}: {}", f.company, f.horizon, f.error)).collect::<Vec<_>>().join("; ")
        },
    });

    let violations: Vec<String> = results
        .iter()
        .flat_map(|r| Model::ALL.iter().map(move |m| (r, *m)))
        .filter(|(r, m)| !r.test.get(*m).is_consistent())
        .map(|(r, m)| format!("{}/{}/{}", r.company, r.horizon, m.name()))
        .collect();
    gates.push(GateResult {
        name: "metric_identities".into(),
        passed: violations.is_empty(),
        hard: true,
        detail: if violations.is_empty() {
            "rmse >= mae >= 0 and finite for every row".into()
        } else {
            format!("violated by {}", violations.join(", "))
        },
    });

    if cfg.force_weights.is_none() {
        let checks: Vec<(String, ModelMetricsRmse)> = match cfg.weight_mode {
            WeightMode::PerCompany => results
                .iter()
                .map(|r| (format!("{}/{}", r.company, r.horizon), r.validation_rmse))
                .collect(),
            WeightMode::Pooled => pooled.iter().map(|(h, v)| (format!("pooled/{h}"), *v)).collect(),
        };
        let bad: Vec<String> = checks
            .iter()
            .filter(|(_, v)| v.ensemble > v.best_single())
            .map(|(k, v)| format!("{k} ({} > {})", v.ensemble, v.best_single()))
            .collect();
        gates.push(GateResult {
            name: "corner_dominance".into(),
            passed: bad.is_empty(),
            hard: true,
            detail: if bad.is_empty() {
                format!("ensemble validation RMSE <= best single learner in {} checks", checks.len())
            } else {
                bad.join("; ")
            },
        });
    }

    if let Some(cmp) = horizon_degradation(results) {
        gates.push(GateResult {
            name: "daily_vs_weekly".into(),
            passed: cmp.ensemble < cmp.worst_learner,
            hard: false,
            detail: format!(
                "mean relative MAE increase daily->weekly: ensemble {:.4}, worst learner ({}) {:.4}",
                cmp.ensemble,
                cmp.worst_name,
                cmp.worst_learner
            ),
        });
    }
    gates
}

/// Mean relative MAE increase from the daily to the weekly horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonDegradation {
    pub ensemble: f64,
    pub worst_learner: f64,
    pub worst_name: &'static str,
}

pub fn horizon_degradation(results: &[CompanyReport]) -> Option<HorizonDegradation> {
    let increase = |m: Model| -> Option<f64> {
        let mut vals = Vec::new();
        for d in results.iter().filter(|r| r.horizon == "daily") {
            let w = results.iter().find(|r| r.horizon == "weekly" && r.company == d.company)?;
            let (md, mw) = (d.test.get(m).mae, w.test.get(m).mae);
            vals.push((mw - md) / md);
        }
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let ensemble = increase(Model::Ensemble)?;
    let mut worst = (f64::NEG_INFINITY, "");
    for m in [Model::Ann, Model::Cart, Model::Gpr] {
        let v = increase(m)?;
        if v > worst.0 {
            worst = (v, m.name());
        }
    }
    Some(HorizonDegradation {
        ensemble,
        worst_learner: worst.0,
        worst_name: worst.1,
    })
}

pub const HISTOGRAM_BINS: usize = 20;

/// Equal-width bins over `[-r, r]` with `r` the largest absolute residual.
/// Returns `(lower, upper, count)` per bin.
pub fn residual_histogram(residuals: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let r = residuals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let r = if r > 0.0 { r } else { 1.0 };
    let width = 2.0 * r / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in residuals {
        let i = (((v + r) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (-r + i as f64 * width, -r + (i + 1) as f64 * width, c))
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `tables/*.csv`, `plots/*.csv` and `report.json` under `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    let tables = dir.join("tables");
    let plots = dir.join("plots");
    for d in [dir, tables.as_path(), plots.as_path()] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    // Per-horizon, per-metric tables: one row per company, then the average.
    type Pick = fn(&Metrics) -> f64;
    let metrics: [(&str, Pick); 3] = [("error_rate", |m| m.error_rate), ("mae", |m| m.mae), ("rmse", |m| m.rmse)];
    for horizon in report.horizons() {
        for (name, pick) in metrics {
            let mut out = String::from("company,ensemble,ann,cart,gpr\n");
            for r in report.results.iter().filter(|r| r.horizon == horizon) {
                let _ = write!(out, "{}", r.company);
                for m in Model::ALL {
                    let _ = write!(out, ",{}", pick(r.test.get(m)));
                }
                out.push('\n');
            }
            out.push_str("AVERAGE");
            for m in Model::ALL {
                let v = report.aggregate(&horizon, m).map_or(f64::NAN, pick);
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
            write_file(&tables.join(format!("{name}_{horizon}.csv")), &out)?;
        }
    }

    let mut cmp = String::from("model,daily_error_rate,weekly_error_rate,daily_mae,weekly_mae\n");
    for m in Model::ALL {
        let d = report.aggregate("daily", m);
        let w = report.aggregate("weekly", m);
        let g = |x: Option<&Metrics>, f: Pick| x.map_or(f64::NAN, f);
        let _ = writeln!(
            cmp,
            "{},{},{},{},{}",
            m.name(),
            g(d, |x| x.error_rate),
            g(w, |x| x.error_rate),
            g(d, |x| x.mae),
            g(w, |x| x.mae)
        );
    }
    write_file(&tables.join("daily_vs_weekly.csv"), &cmp)?;

    for m in Model::ALL {
        let mut reg = String::from("horizon,company,anchor_date,actual,predicted\n");
        let mut hist = String::from("horizon,bin_lower,bin_upper,count\n");
        for horizon in report.horizons() {
            let mut residuals = Vec::new();
            for r in report.results.iter().filter(|r| r.horizon == horizon) {
                for p in &r.predictions {
                    let _ = writeln!(reg, "{},{},{},{},{}", horizon, r.company, p.anchor_date, p.actual, p.get(m));
                    residuals.push(p.get(m) - p.actual);
                }
            }
            for (lo, hi, c) in residual_histogram(&residuals, HISTOGRAM_BINS) {
                let _ = writeln!(hist, "{horizon},{lo},{hi},{c}");
            }
        }
        write_file(&plots.join(format!("regression_{}.csv", m.name())), &reg)?;
        write_file(&plots.join(format!("residual_hist_{}.csv", m.name())), &hist)?;
    }

    let mut conv = String::from("horizon,company,iteration,best,mean\n");
    for r in &report.results {
        for (i, h) in r.cs_history.iter().enumerate() {
            let _ = writeln!(conv, "{},{},{},{},{}", r.horizon, r.company, i + 1, h.best, h.mean);
        }
    }
    write_file(&plots.join("cs_convergence.csv"), &conv)?;

    write_file(&dir.join("report.json"), &report.to_json()?)
}
