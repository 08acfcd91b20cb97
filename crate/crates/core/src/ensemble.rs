//! Weighted combination of the three learners and the training pipeline that
//! produces a persisted [`EnsembleBundle`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ann::{self, AnnModel, LmParams};
use crate::cart::{self, CartModel, CartParams};
use crate::cuckoo::{self, Bounds, CsParams, CsResult};
use crate::error::{Error, Result, StageExt};
use crate::features::{self, FeatureConfig, FeatureDataset, NormalizationSpec};
use crate::gpr::{self, GprModel, KernelParams};
use crate::market::{self, MarketPanel, SplitSpec};

/// Smallest admissible `a + b + c`.
pub const EPS_SUM: f64 = 1e-6;

pub const BUNDLE_FORMAT_VERSION: &str = "1.0";
const BUNDLE_MAJOR: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    Ann,
    Cart,
    Gpr,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 3] = [LearnerKind::Ann, LearnerKind::Cart, LearnerKind::Gpr];

    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::Ann => "ann",
            LearnerKind::Cart => "cart",
            LearnerKind::Gpr => "gpr",
        }
    }
}

impl std::str::FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ann" => Ok(LearnerKind::Ann),
            "cart" => Ok(LearnerKind::Cart),
            "gpr" => Ok(LearnerKind::Gpr),
            other => Err(Error::InvalidParameter(format!("unknown learner {other:?}"))),
        }
    }
}

/// Coefficients of the ANN (`a`), CART (`b`) and GPR (`c`) forecasts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl WeightVector {
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        let w = Self { a, b, c };
        w.validate()?;
        Ok(w)
    }

    /// Weight vector putting everything on one learner.
    pub fn corner(kind: LearnerKind) -> Self {
        match kind {
            LearnerKind::Ann => Self { a: 1.0, b: 0.0, c: 0.0 },
            LearnerKind::Cart => Self { a: 0.0, b: 1.0, c: 0.0 },
            LearnerKind::Gpr => Self { a: 0.0, b: 0.0, c: 1.0 },
        }
    }

    pub fn uniform() -> Self {
        let third = 1.0 / 3.0;
        Self { a: third, b: third, c: third }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            [a, b, c] => Self::new(*a, *b, *c),
            _ => Err(Error::DimensionMismatch { expected: 3, actual: v.len() }),
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.a, self.b, self.c]
    }

    pub fn sum(&self) -> f64 {
        self.a + self.b + self.c
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::InvalidParameter(format!("weights {self:?} must lie in [0, 1]")));
        }
        Ok(())
    }
}

/// `(a*w + b*x + c*y) / (a + b + c)`.
pub fn combine(weights: &WeightVector, w: f64, x: f64, y: f64) -> Result<f64> {
    let sum = weights.sum();
    if sum.is_nan() || sum < EPS_SUM {
        return Err(Error::DegenerateWeights { sum, eps: EPS_SUM });
    }
    Ok((weights.a * w + weights.b * x + weights.c * y) / sum)
}

/// Per-sample learner forecasts and the realized prices, in price units.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearnerOutputs {
    pub ann: Vec<f64>,
    pub cart: Vec<f64>,
    pub gpr: Vec<f64>,
    pub actual: Vec<f64>,
}

impl LearnerOutputs {
    pub fn new(ann: Vec<f64>, cart: Vec<f64>, gpr: Vec<f64>, actual: Vec<f64>) -> Result<Self> {
        let n = actual.len();
        for col in [&ann, &cart, &gpr] {
            if col.len() != n {
                return Err(Error::DimensionMismatch { expected: n, actual: col.len() });
            }
        }
        Ok(Self { ann, cart, gpr, actual })
    }

    pub fn len(&self) -> usize {
        self.actual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actual.is_empty()
    }

    pub fn column(&self, kind: LearnerKind) -> &[f64] {
        match kind {
            LearnerKind::Ann => &self.ann,
            LearnerKind::Cart => &self.cart,
            LearnerKind::Gpr => &self.gpr,
        }
    }

    pub fn push(&mut self, ann: f64, cart: f64, gpr: f64, actual: f64) {
        self.ann.push(ann);
        self.cart.push(cart);
        self.gpr.push(gpr);
        self.actual.push(actual);
    }

    /// Concatenation of several companies' outputs (pooled weighting).
    pub fn concat(parts: &[LearnerOutputs]) -> Self {
        let mut out = Self::default();
        for p in parts {
            out.ann.extend_from_slice(&p.ann);
            out.cart.extend_from_slice(&p.cart);
            out.gpr.extend_from_slice(&p.gpr);
            out.actual.extend_from_slice(&p.actual);
        }
        out
    }

    /// Ensemble forecasts under `weights`.
    pub fn combined(&self, weights: &WeightVector) -> Result<Vec<f64>> {
        (0..self.len())
            .map(|i| combine(weights, self.ann[i], self.cart[i], self.gpr[i]))
            .collect()
    }

    /// Root mean squared error of the combined forecast.
    pub fn rmse(&self, weights: &WeightVector) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::Validation("no learner outputs".into()));
        }
        let mut s = 0.0;
        for i in 0..self.len() {
            let e = self.actual[i] - combine(weights, self.ann[i], self.cart[i], self.gpr[i])?;
            s += e * e;
        }
        Ok((s / self.len() as f64).sqrt())
    }
}

/// `1 / (1 + RMSE)`; weight vectors below [`EPS_SUM`] score 0.
pub fn ensemble_fitness(weights: &WeightVector, outputs: &LearnerOutputs) -> Result<f64> {
    match outputs.rmse(weights) {
        Ok(r) => Ok(1.0 / (1.0 + r)),
        Err(Error::DegenerateWeights { .. }) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Initial nests of the weight search: the three corners and the uniform vector.
pub fn seed_weights() -> Vec<WeightVector> {
    vec![
        WeightVector::corner(LearnerKind::Ann),
        WeightVector::corner(LearnerKind::Cart),
        WeightVector::corner(LearnerKind::Gpr),
        WeightVector::uniform(),
    ]
}

/// Cuckoo search over `[0, 1]^3` for the weights maximizing validation fitness.
///
/// The seeded corners guarantee the result is at least as good as every
/// single learner on `outputs`.
pub fn optimize_weights(outputs: &LearnerOutputs, params: &CsParams) -> Result<(WeightVector, CsResult)> {
    if outputs.is_empty() {
        return Err(Error::Validation("cannot optimize weights on empty outputs".into()));
    }
    let bounds = Bounds::unit(3)?;
    let seeds: Vec<Vec<f64>> = seed_weights().iter().map(|w| w.to_array().to_vec()).collect();
    let population = cuckoo::seed_population(params, &bounds, &seeds)?;
    let fitness = |v: &[f64]| {
        let w = WeightVector { a: v[0], b: v[1], c: v[2] };
        ensemble_fitness(&w, outputs).unwrap_or(f64::NAN)
    };
    let result = cuckoo::optimize_from(fitness, &bounds, params, population)?;

    // Compare on RMSE directly: distinct RMSEs can round to the same fitness.
    let mut best = WeightVector::from_slice(&result.best_solution)?;
    let mut best_rmse = rmse_or_inf(outputs, &best);
    for seed in seed_weights() {
        let r = rmse_or_inf(outputs, &seed);
        if r < best_rmse {
            best = seed;
            best_rmse = r;
        }
    }
    Ok((best, result))
}

fn rmse_or_inf(outputs: &LearnerOutputs, w: &WeightVector) -> f64 {
    outputs.rmse(w).unwrap_or(f64::INFINITY)
}

/// Everything needed to train one ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub split: SplitSpec,
    pub lm: LmParams,
    pub cart: CartParams,
    pub kernel: KernelParams,
    /// Choose GP length scale and noise by log marginal likelihood.
    pub gpr_grid_search: bool,
    pub cs: CsParams,
    /// Seeds the network initialization and the weight search.
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            split: SplitSpec::default(),
            lm: LmParams::default(),
            cart: CartParams::default(),
            kernel: KernelParams::default(),
            gpr_grid_search: false,
            cs: CsParams::default(),
            seed: 42,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.lm.validate()?;
        self.cart.validate()?;
        self.kernel.validate()?;
        self.cs.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub company: String,
    pub seed: u64,
    /// FNV-1a hash of the training block's features and targets.
    pub data_fingerprint: String,
    pub created_at: String,
}

/// Persisted trained ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleBundle {
    pub format_version: String,
    pub feature_config: FeatureConfig,
    pub normalization: NormalizationSpec,
    pub ann: AnnModel,
    pub cart: CartModel,
    pub gpr: GprModel,
    pub weights: WeightVector,
    pub validation_fitness: f64,
    pub provenance: Provenance,
}

/// One forecast broken down by learner, in price units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub ensemble: f64,
    pub ann: f64,
    pub cart: f64,
    pub gpr: f64,
}

impl Forecast {
    pub fn get(&self, kind: LearnerKind) -> f64 {
        match kind {
            LearnerKind::Ann => self.ann,
            LearnerKind::Cart => self.cart,
            LearnerKind::Gpr => self.gpr,
        }
    }
}

impl EnsembleBundle {
    /// Learner forecasts in price units, before weighting.
    pub fn learner_predictions(&self, features: &[f64]) -> Result<[f64; 3]> {
        let x = self.normalization.apply_features(features)?;
        let norm = &self.normalization;
        Ok([
            norm.invert_target(self.ann.forward(&x)?),
            norm.invert_target(self.cart.predict(&x)?),
            norm.invert_target(self.gpr.predict_mean(&x)?),
        ])
    }

    pub fn forecast(&self, features: &[f64]) -> Result<Forecast> {
        let [ann, cart, gpr] = self.learner_predictions(features)?;
        Ok(Forecast {
            ensemble: combine(&self.weights, ann, cart, gpr)?,
            ann,
            cart,
            gpr,
        })
    }

    /// Learner outputs over a dataset.
    pub fn outputs(&self, data: &FeatureDataset) -> Result<LearnerOutputs> {
        let mut out = LearnerOutputs::default();
        for s in data.samples() {
            let [a, c, g] = self.learner_predictions(&s.features)?;
            out.push(a, c, g, s.target);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format_version: String,
        }
        let header: Header = serde_json::from_str(text)?;
        let major = header.format_version.split('.').next().and_then(|m| m.parse::<u32>().ok());
        if major != Some(BUNDLE_MAJOR) {
            return Err(Error::BundleVersion {
                found: header.format_version,
                supported: BUNDLE_MAJOR,
            });
        }
        let bundle: Self = serde_json::from_str(text)?;
        bundle.weights.validate()?;
        if bundle.normalization.dim() != bundle.feature_config.feature_len() {
            return Err(Error::DimensionMismatch {
                expected: bundle.feature_config.feature_len(),
                actual: bundle.normalization.dim(),
            });
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Forecast for one sample through the bundle.
pub fn ensemble_predict(bundle: &EnsembleBundle, features: &[f64]) -> Result<f64> {
    let expected = bundle.feature_config.feature_len();
    if features.len() != expected {
        return Err(Error::DimensionMismatch { expected, actual: features.len() });
    }
    Ok(bundle.forecast(features)?.ensemble)
}

/// A trained bundle plus the intermediate products used for evaluation.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub bundle: EnsembleBundle,
    pub search: CsResult,
    /// Outputs on the block the weights were fitted to.
    pub validation: LearnerOutputs,
    pub test: FeatureDataset,
    pub train_len: usize,
    pub ann_trace: Vec<f64>,
}

pub(crate) fn fingerprint(data: &FeatureDataset) -> String {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut feed = |v: f64| {
        for byte in v.to_bits().to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(PRIME);
        }
    };
    for s in data.samples() {
        s.features.iter().for_each(|v| feed(*v));
        feed(s.target);
    }
    format!("{h:016x}")
}

/// Offset subtracted from normalized targets so the GP prior mean is zero at
/// the fitted scale.
const GP_PRIOR_MEAN: f64 = 0.5;

/// Dataset -> split -> normalization -> three learners -> weight search.
pub fn train_ensemble(panel: &MarketPanel, company: &str, config: &FeatureConfig, params: &TrainParams) -> Result<TrainingRun> {
    params.validate().stage("config")?;
    let series = panel.company(company).ok_or_else(|| {
        Error::Validation(format!(
            "unknown company {company:?}; available: {}",
            panel.symbols().join(", ")
        ))
        .in_stage("data")
    })?;
    let dataset = features::build_dataset(panel, series, config).stage("features")?;
    let parts = market::split(&dataset, &params.split).stage("split")?;
    let norm = NormalizationSpec::fit(&parts.train).stage("normalization")?;
    let (xs, ys) = norm.transform(&parts.train).stage("normalization")?;
    let dim = config.feature_len();

    let (ann_out, cart_out, gpr_out) = std::thread::scope(|s| {
        let ann_job = s.spawn(|| {
            let init = AnnModel::init(dim, params.seed)?;
            ann::train_lm(&init, &xs, &ys, &params.lm)
        });
        let cart_job = s.spawn(|| cart::fit(&xs, &ys, &params.cart));
        let gpr_job = s.spawn(|| {
            if params.gpr_grid_search {
                gpr::fit_grid_search(&xs, &ys, &params.kernel, GP_PRIOR_MEAN)
            } else {
                GprModel::fit_with_prior_mean(&xs, &ys, &params.kernel, GP_PRIOR_MEAN)
            }
        });
        (
            ann_job.join().expect("ANN training thread panicked"),
            cart_job.join().expect("CART training thread panicked"),
            gpr_job.join().expect("GPR training thread panicked"),
        )
    });
    let ann_out = ann_out.stage("ann")?;
    let cart_model = cart_out.stage("cart")?;
    let gpr_model = gpr_out.stage("gpr")?;

    let mut bundle = EnsembleBundle {
        format_version: BUNDLE_FORMAT_VERSION.to_string(),
        feature_config: config.clone(),
        normalization: norm,
        ann: ann_out.model,
        cart: cart_model,
        gpr: gpr_model,
        weights: WeightVector::uniform(),
        validation_fitness: 0.0,
        provenance: Provenance {
            company: company.to_string(),
            seed: params.seed,
            data_fingerprint: fingerprint(&parts.train),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        },
    };

    // Without a validation tail the weights are fitted on the training block.
    let weight_block = if parts.validation.is_empty() { &parts.train } else { &parts.validation };
    let validation = bundle.outputs(weight_block).stage("weights")?;
    let cs = CsParams { seed: params.seed, ..params.cs.clone() };
    let (weights, search) = optimize_weights(&validation, &cs).stage("weights")?;
    bundle.weights = weights;
    bundle.validation_fitness = ensemble_fitness(&weights, &validation).stage("weights")?;

    Ok(TrainingRun {
        bundle,
        search,
        validation,
        test: parts.test,
        train_len: parts.train.len(),
        ann_trace: ann_out.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn combine_fixed_point_and_corner() {
        let ones = WeightVector::new(1.0, 1.0, 1.0).unwrap();
        assert_eq!(combine(&ones, 7.5, 7.5, 7.5).unwrap(), 7.5);
        let ann_only = WeightVector::corner(LearnerKind::Ann);
        assert_eq!(combine(&ann_only, 123.456, 9.0, -4.0).unwrap(), 123.456);
    }

    #[test]
    fn combine_reported_weights() {
        let w = WeightVector::new(0.876, 0.915, 0.131).unwrap();
        let oracle = (0.876 * 100.0 + 0.915 * 200.0 + 0.131 * 300.0) / (0.876 + 0.915 + 0.131);
        assert_abs_diff_eq!(oracle, 309.9 / 1.922, epsilon = 1e-12);
        assert_abs_diff_eq!(combine(&w, 100.0, 200.0, 300.0).unwrap(), 161.2383, epsilon = 1e-4);
        assert_abs_diff_eq!(combine(&w, 100.0, 200.0, 300.0).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn combine_rejects_degenerate() {
        let tiny = WeightVector::new(1e-7, 1e-7, 1e-7).unwrap();
        assert!(matches!(combine(&tiny, 1.0, 2.0, 3.0), Err(Error::DegenerateWeights { .. })));
        assert!(WeightVector::new(1.2, 0.0, 0.0).is_err());
        assert!(WeightVector::new(0.5, -0.1, 0.0).is_err());
    }

    fn outputs_with_residual(r: f64) -> LearnerOutputs {
        let actual: Vec<f64> = (0..10).map(|i| 100.0 + i as f64).collect();
        let pred: Vec<f64> = actual.iter().map(|a| a + r).collect();
        LearnerOutputs::new(pred.clone(), pred.clone(), pred, actual).unwrap()
    }

    #[test]
    fn fitness_fixtures() {
        let w = WeightVector::uniform();
        approx::assert_abs_diff_eq!(ensemble_fitness(&w, &outputs_with_residual(0.0)).unwrap(), 1.0, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(ensemble_fitness(&w, &outputs_with_residual(1.0)).unwrap(), 0.5, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(ensemble_fitness(&w, &outputs_with_residual(3.0)).unwrap(), 0.25, epsilon = 1e-12);
        let zero = WeightVector::new(0.0, 0.0, 0.0).unwrap();
        assert_eq!(ensemble_fitness(&zero, &outputs_with_residual(1.0)).unwrap(), 0.0);
        assert!(ensemble_fitness(&w, &LearnerOutputs::default()).is_err());
    }

    #[test]
    fn outputs_length_checked() {
        assert!(LearnerOutputs::new(vec![1.0], vec![1.0, 2.0], vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn perfect_learner_dominates() {
        let actual: Vec<f64> = (0..60).map(|i| 50.0 + (i as f64 * 0.37).sin() * 4.0).collect();
        let noisy = |k: f64| actual.iter().enumerate().map(|(i, a)| a + ((i as f64 * k).cos() * 3.0)).collect::<Vec<_>>();
        for (perfect, idx) in [(LearnerKind::Ann, 0), (LearnerKind::Cart, 1), (LearnerKind::Gpr, 2)] {
            let mut cols = [noisy(1.3), noisy(2.9), noisy(0.7)];
            cols[idx] = actual.clone();
            let [a, b, c] = cols;
            let out = LearnerOutputs::new(a, b, c, actual.clone()).unwrap();
            let (w, _) = optimize_weights(&out, &CsParams::default()).unwrap();
            let arr = w.to_array();
            let others = arr.iter().enumerate().filter(|(i, _)| *i != idx).map(|(_, v)| *v);
            assert!(others.fold(f64::MIN, f64::max) < arr[idx], "{perfect:?}: {w:?}");
        }
    }

    #[test]
    fn identical_learners_flat_landscape() {
        let out = outputs_with_residual(2.0);
        let (w, res) = optimize_weights(&out, &CsParams::default()).unwrap();
        approx::assert_abs_diff_eq!(ensemble_fitness(&w, &out).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(res.best_fitness, 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn learner_kind_parsing() {
        assert_eq!("CART".parse::<LearnerKind>().unwrap(), LearnerKind::Cart);
        assert!("svm".parse::<LearnerKind>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn combine_is_convex_and_scale_free(
                a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0,
                p in prop::array::uniform3(1.0f64..1000.0),
                lambda in 0.01f64..1.0,
            ) {
                let w = WeightVector::new(a, b, c).unwrap();
                prop_assume!(w.sum() >= EPS_SUM / lambda);
                let y = combine(&w, p[0], p[1], p[2]).unwrap();
                let lo = p.iter().copied().fold(f64::MAX, f64::min);
                let hi = p.iter().copied().fold(f64::MIN, f64::max);
                prop_assert!(y >= lo - 1e-9 && y <= hi + 1e-9);
                let scaled = WeightVector::new(a * lambda, b * lambda, c * lambda).unwrap();
                let ys = combine(&scaled, p[0], p[1], p[2]).unwrap();
                prop_assert!((ys - y).abs() <= 1e-9 * y.abs());
            }

            #[test]
            fn fitness_in_unit_interval(resid in prop::collection::vec(-50.0f64..50.0, 1..30), w in prop::array::uniform3(0.0f64..1.0)) {
                let actual: Vec<f64> = resid.iter().enumerate().map(|(i, _)| 100.0 + i as f64).collect();
                let pred: Vec<f64> = actual.iter().zip(&resid).map(|(a, r)| a + r).collect();
                let out = LearnerOutputs::new(pred.clone(), actual.clone(), pred, actual).unwrap();
                let f = ensemble_fitness(&WeightVector::new(w[0], w[1], w[2]).unwrap(), &out).unwrap();
                prop_assert!((0.0..=1.0).contains(&f));
            }
        }
    }
}
