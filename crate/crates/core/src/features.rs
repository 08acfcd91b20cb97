//! Technical indicators and the per-day feature vector.
//!
//! A sample anchored at trading day `k` holds, in this order:
//!
//! | slot | meaning                                                    |
//! |------|------------------------------------------------------------|
//! | 0    | covariance of the stock with the market index (14 days)    |
//! | 1    | covariance of the stock with the sector index (14 days)    |
//! | 2    | mean of the market index over the last 7 days              |
//! | 3    | pooled mean of sector companies' closes                    |
//! | 4    | pooled population std of sector companies' closes          |
//! | 5    | MACD, EMA(13) - EMA(26)                                    |
//! | 6    | RSI over 14 day-over-day changes                           |
//! | 7..  | lagged closes `s(k - n*t), ..., s(k - t), s(k)`            |
//!
//! The target is the close at `k + horizon`. Every input reads indices `<= k`.

use std::fmt::Write as _;
use std::ops::Range;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{MarketPanel, PriceSeries};

/// Number of indicator slots ahead of the lag sequence.
pub const INDICATOR_COUNT: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Number of lagged closes before `s(k)`.
    pub lag_count: usize,
    /// Trading days between consecutive lags.
    pub lag_stride: usize,
    /// Forecast offset in trading days.
    pub horizon: usize,
    pub corr_window: usize,
    pub index_window: usize,
    pub sector_window: usize,
    pub macd_short: usize,
    pub macd_long: usize,
    pub rsi_window: usize,
    /// Use Pearson correlation instead of the raw windowed covariance.
    pub pearson_correlation: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self::daily()
    }
}

impl FeatureConfig {
    /// Next-day forecasting from four closes five days apart.
    pub fn daily() -> Self {
        Self {
            lag_count: 3,
            lag_stride: 5,
            horizon: 1,
            corr_window: 14,
            index_window: 7,
            sector_window: 14,
            macd_short: 13,
            macd_long: 26,
            rsi_window: 14,
            pearson_correlation: false,
        }
    }

    /// One-week-ahead forecasting from the last five weeks.
    pub fn weekly() -> Self {
        Self {
            lag_count: 5,
            lag_stride: 7,
            horizon: 7,
            ..Self::daily()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lag_count", self.lag_count),
            ("lag_stride", self.lag_stride),
            ("horizon", self.horizon),
            ("corr_window", self.corr_window),
            ("index_window", self.index_window),
            ("sector_window", self.sector_window),
            ("macd_short", self.macd_short),
            ("rsi_window", self.rsi_window),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidParameter(format!("{name} must be at least 1")));
        }
        if self.corr_window < 2 {
            return Err(Error::InvalidParameter("corr_window must be at least 2".into()));
        }
        if self.macd_short >= self.macd_long {
            return Err(Error::InvalidParameter(format!(
                "macd_short ({}) must be below macd_long ({})",
                self.macd_short, self.macd_long
            )));
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        INDICATOR_COUNT + self.lag_count + 1
    }

    /// First anchor index with enough history for every input.
    pub fn warmup(&self) -> usize {
        [
            self.lag_count * self.lag_stride,
            self.macd_long - 1,
            self.corr_window - 1,
            self.index_window - 1,
            self.sector_window - 1,
            self.rsi_window,
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
    }

    /// Column names in slot order.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names: Vec<String> = [
            "corr_market",
            "corr_sector",
            "market_index",
            "sector_mean",
            "sector_std",
            "macd",
            "rsi",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for j in (0..=self.lag_count).rev() {
            names.push(match j * self.lag_stride {
                0 => "s(k)".to_string(),
                off => format!("s(k-{off})"),
            });
        }
        names
    }
}

/// Exponential moving average with smoothing `2/(window+1)`, seeded by the
/// simple mean of the first `window` values.
///
/// The returned vector starts at input index `window - 1`.
pub fn ema(closes: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::InvalidParameter("EMA window must be at least 1".into()));
    }
    if closes.len() < window {
        return Err(Error::InsufficientHistory {
            required: window,
            available: closes.len(),
        });
    }
    let alpha = 2.0 / (window as f64 + 1.0);
    let seed = closes[..window].iter().sum::<f64>() / window as f64;
    let mut out = Vec::with_capacity(closes.len() - window + 1);
    out.push(seed);
    let mut prev = seed;
    for &c in &closes[window..] {
        prev = alpha * c + (1.0 - alpha) * prev;
        out.push(prev);
    }
    Ok(out)
}

/// MACD at the last index, with explicit short and long windows.
pub fn macd_with(closes: &[f64], short: usize, long: usize) -> Result<f64> {
    if short >= long {
        return Err(Error::InvalidParameter(format!(
            "MACD short window {short} must be below long window {long}"
        )));
    }
    let s = ema(closes, short)?;
    let l = ema(closes, long)?;
    Ok(s[s.len() - 1] - l[l.len() - 1])
}

/// `EMA(13) - EMA(26)` at the last index.
pub fn macd(closes: &[f64]) -> Result<f64> {
    macd_with(closes, 13, 26)
}

/// Up-day/down-day strength index in `[0, 100]` over consecutive changes of
/// `closes`.
///
/// Only the counts of rising and falling days enter; flat days count toward
/// neither. No down-days gives 100; no changes at all gives 50.
pub fn rsi(closes: &[f64]) -> f64 {
    let (mut gains, mut losses) = (0usize, 0usize);
    for w in closes.windows(2) {
        if w[1] > w[0] {
            gains += 1;
        } else if w[1] < w[0] {
            losses += 1;
        }
    }
    match (gains, losses) {
        (0, 0) => 50.0,
        (_, 0) => 100.0,
        (g, l) => {
            let rs = g as f64 / l as f64;
            100.0 - 100.0 / (1.0 + rs)
        }
    }
}

/// `sum((x_i - mean_x)(y_i - mean_y)) / (len - 1)` over two equal windows.
pub fn window_covariance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InsufficientHistory {
            required: 2,
            available: x.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let s: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok(s / (n - 1.0))
}

/// Pearson correlation over two equal windows; 0 when either is constant.
pub fn window_correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    let cxy = window_covariance(x, y)?;
    let sx = window_covariance(x, x)?.sqrt();
    let sy = window_covariance(y, y)?.sqrt();
    if sx == 0.0 || sy == 0.0 {
        Ok(0.0)
    } else {
        Ok(cxy / (sx * sy))
    }
}

/// Pooled mean and population standard deviation of every company's closes
/// over the `window` days ending at `at`.
pub fn sector_stats(companies: &[PriceSeries], at: usize, window: usize) -> Result<(f64, f64)> {
    if companies.is_empty() {
        return Err(Error::Validation("sector has no companies".into()));
    }
    if window == 0 || at + 1 < window {
        return Err(Error::InsufficientHistory {
            required: window,
            available: at + 1,
        });
    }
    let start = at + 1 - window;
    let mut count = 0usize;
    let mut sum = 0.0;
    for c in companies {
        let closes = c.closes();
        if closes.len() <= at {
            return Err(Error::InsufficientHistory {
                required: at + 1,
                available: closes.len(),
            });
        }
        sum += closes[start..=at].iter().sum::<f64>();
        count += window;
    }
    let mean = sum / count as f64;
    let ss: f64 = companies
        .iter()
        .flat_map(|c| c.closes()[start..=at].iter())
        .map(|v| (v - mean) * (v - mean))
        .sum();
    Ok((mean, (ss / count as f64).sqrt()))
}

/// One supervised example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSample {
    pub features: Vec<f64>,
    pub target: f64,
    pub anchor_date: NaiveDate,
}

/// Feature vector at anchor `k`, without a target. Fails when `k` is inside
/// the warm-up span.
pub fn build_features(panel: &MarketPanel, company: &PriceSeries, k: usize, config: &FeatureConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let warmup = config.warmup();
    if k < warmup {
        return Err(Error::InsufficientHistory {
            required: warmup + 1,
            available: k + 1,
        });
    }
    let closes = company.closes();
    let market = panel.market_index.closes();
    let sector = panel.sector_index.closes();
    let len = closes.len().min(market.len()).min(sector.len());
    if k >= len {
        return Err(Error::InsufficientHistory {
            required: k + 1,
            available: len,
        });
    }

    let corr_range = k + 1 - config.corr_window..k + 1;
    let relate = |x: &[f64], y: &[f64]| {
        if config.pearson_correlation {
            window_correlation(x, y)
        } else {
            window_covariance(x, y)
        }
    };
    let c_market = relate(&closes[corr_range.clone()], &market[corr_range.clone()])?;
    let c_sector = relate(&closes[corr_range.clone()], &sector[corr_range])?;
    let index_level = market[k + 1 - config.index_window..=k].iter().sum::<f64>() / config.index_window as f64;
    let (sector_mean, sector_std) = sector_stats(&panel.companies, k, config.sector_window)?;
    let m = macd_with(&closes[..=k], config.macd_short, config.macd_long)?;
    let r = rsi(&closes[k - config.rsi_window..=k]);

    let mut features = Vec::with_capacity(config.feature_len());
    features.extend_from_slice(&[c_market, c_sector, index_level, sector_mean, sector_std, m, r]);
    for j in (0..=config.lag_count).rev() {
        features.push(closes[k - j * config.lag_stride]);
    }
    Ok(features)
}

/// Sample anchored at `k`, or `None` when `k` lacks history or a target.
pub fn build_sample(panel: &MarketPanel, company: &PriceSeries, k: usize, config: &FeatureConfig) -> Result<Option<FeatureSample>> {
    config.validate()?;
    let closes = company.closes();
    if k < config.warmup() || k + config.horizon >= closes.len() {
        return Ok(None);
    }
    let features = build_features(panel, company, k, config)?;
    Ok(Some(FeatureSample {
        features,
        target: closes[k + config.horizon],
        anchor_date: company.dates()[k],
    }))
}

/// Every admissible sample for `company`, in date order.
pub fn build_dataset(panel: &MarketPanel, company: &PriceSeries, config: &FeatureConfig) -> Result<FeatureDataset> {
    config.validate()?;
    if company.dates() != panel.dates() {
        return Err(Error::Alignment(format!(
            "{} is not aligned with the panel",
            company.symbol()
        )));
    }
    let mut samples = Vec::new();
    for k in config.warmup()..company.len() {
        if let Some(s) = build_sample(panel, company, k, config)? {
            samples.push(s);
        }
    }
    if samples.is_empty() {
        return Err(Error::InsufficientHistory {
            required: config.warmup() + config.horizon + 1,
            available: company.len(),
        });
    }
    Ok(FeatureDataset::new(samples))
}

/// Chronologically ordered samples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureDataset {
    samples: Vec<FeatureSample>,
}

impl FeatureDataset {
    pub fn new(samples: Vec<FeatureSample>) -> Self {
        Self { samples }
    }

    pub fn samples(&self) -> &[FeatureSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn slice(&self, range: Range<usize>) -> Self {
        Self::new(self.samples[range].to_vec())
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.features.len())
    }

    pub fn inputs(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.features.clone()).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.target).collect()
    }

    /// One row per sample; the header names the feature slots.
    pub fn to_csv(&self, config: &FeatureConfig) -> String {
        let mut out = String::from("anchor_date");
        for name in config.feature_names() {
            out.push(',');
            out.push_str(&name);
        }
        out.push_str(",target\n");
        for s in &self.samples {
            let _ = write!(out, "{}", s.anchor_date.format("%Y-%m-%d"));
            for v in &s.features {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", s.target);
        }
        out
    }
}

/// Closed range `[min, max]` of one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let (min, max) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Self { min, max }
    }

    /// Maps into `[0, 1]`, clamping. A degenerate range maps to 0.5.
    pub fn apply(&self, v: f64) -> f64 {
        let span = self.max - self.min;
        if span <= 0.0 {
            0.5
        } else {
            ((v - self.min) / span).clamp(0.0, 1.0)
        }
    }

    pub fn invert(&self, u: f64) -> f64 {
        self.min + u * (self.max - self.min)
    }
}

/// Min-max scaling learned from the training block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub features: Vec<MinMax>,
    pub target: MinMax,
}

impl NormalizationSpec {
    pub fn fit(train: &FeatureDataset) -> Result<Self> {
        let dim = train
            .feature_dim()
            .ok_or_else(|| Error::Validation("cannot fit normalization on an empty dataset".into()))?;
        if let Some(bad) = train.samples().iter().find(|s| s.features.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: bad.features.len(),
            });
        }
        let features = (0..dim)
            .map(|j| MinMax::of(train.samples().iter().map(|s| s.features[j])))
            .collect();
        let target = MinMax::of(train.samples().iter().map(|s| s.target));
        Ok(Self { features, target })
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn apply_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(self.features.iter().zip(x).map(|(r, v)| r.apply(*v)).collect())
    }

    pub fn apply_target(&self, y: f64) -> f64 {
        self.target.apply(y)
    }

    pub fn invert_target(&self, u: f64) -> f64 {
        self.target.invert(u)
    }

    /// Normalized inputs and targets of a dataset.
    pub fn transform(&self, data: &FeatureDataset) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let xs = data
            .samples()
            .iter()
            .map(|s| self.apply_features(&s.features))
            .collect::<Result<Vec<_>>>()?;
        let ys = data.samples().iter().map(|s| self.apply_target(s.target)).collect();
        Ok((xs, ys))
    }
}
