//! Daily price series: CSV ingestion, date alignment across a panel, and
//! chronological train/validation/test partitioning.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureDataset;

/// Closing prices of one instrument on consecutive trading days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    symbol: String,
    dates: Vec<NaiveDate>,
    closes: Vec<f64>,
}

impl PriceSeries {
    /// Builds a series from already-ordered data, checking every invariant.
    pub fn new(symbol: impl Into<String>, dates: Vec<NaiveDate>, closes: Vec<f64>) -> Result<Self> {
        let symbol = symbol.into();
        if dates.len() != closes.len() {
            return Err(Error::Validation(format!(
                "{symbol}: {} dates but {} closes",
                dates.len(),
                closes.len()
            )));
        }
        if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
            let msg = if w[0] == w[1] {
                format!("{symbol}: duplicate date {}", w[0])
            } else {
                format!("{symbol}: dates not increasing at {} -> {}", w[0], w[1])
            };
            return Err(Error::Validation(msg));
        }
        if let Some((i, c)) = closes.iter().enumerate().find(|(_, c)| !(c.is_finite() && **c > 0.0)) {
            return Err(Error::Validation(format!(
                "{symbol}: non-positive price {c} on {}",
                dates[i]
            )));
        }
        Ok(Self {
            symbol,
            dates,
            closes,
        })
    }

    pub fn symbol(&self) -> &str {
        &self.symbol
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn closes(&self) -> &[f64] {
        &self.closes
    }

    pub fn len(&self) -> usize {
        self.closes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.closes.is_empty()
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    /// Serializes as a `date,close` CSV document. Closes use the shortest
    /// representation that parses back to the identical `f64`.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.len() * 20 + 11);
        out.push_str("date,close\n");
        for (d, c) in self.dates.iter().zip(&self.closes) {
            let _ = writeln!(out, "{},{}", d.format("%Y-%m-%d"), c);
        }
        out
    }

    fn restricted_to(&self, keep: &BTreeSet<NaiveDate>) -> Self {
        let (dates, closes) = self
            .dates
            .iter()
            .zip(&self.closes)
            .filter(|(d, _)| keep.contains(d))
            .map(|(d, c)| (*d, *c))
            .unzip();
        Self {
            symbol: self.symbol.clone(),
            dates,
            closes,
        }
    }
}

/// Parses a CSV document with a header naming a `date` and a `close` column.
///
/// Rows may appear in any order; the result is sorted by date. Line numbers in
/// errors are 1-based and count the header.
pub fn parse_price_csv(symbol: &str, text: &str) -> Result<PriceSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let date_col = find("date").ok_or_else(|| Error::Parse {
        line: 1,
        message: "header has no `date` column".into(),
    })?;
    let close_col = find("close").ok_or_else(|| Error::Parse {
        line: 1,
        message: "header has no `close` column".into(),
    })?;

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |col: usize, what: &str| {
            record.get(col).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing {what} field"),
            })
        };
        let raw_date = field(date_col, "date")?;
        let date = NaiveDate::parse_from_str(raw_date, "%Y-%m-%d").map_err(|e| Error::Parse {
            line,
            message: format!("bad date {raw_date:?}: {e}"),
        })?;
        let raw_close = field(close_col, "close")?;
        let close: f64 = raw_close.parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad price {raw_close:?}"),
        })?;
        if !close.is_finite() {
            return Err(Error::Parse {
                line,
                message: format!("bad price {raw_close:?}"),
            });
        }
        rows.push((date, close));
    }
    rows.sort_by_key(|(d, _)| *d);
    let (dates, closes) = rows.into_iter().unzip();
    PriceSeries::new(symbol, dates, closes)
}

/// Reads a CSV price file; the symbol is the file stem.
pub fn read_price_csv(path: &Path) -> Result<PriceSeries> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let symbol = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("series");
    parse_price_csv(symbol, &text)
}

/// Market index, sector index, and the sector's companies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketPanel {
    pub market_index: PriceSeries,
    pub sector_index: PriceSeries,
    pub companies: Vec<PriceSeries>,
}

impl MarketPanel {
    pub fn company(&self, symbol: &str) -> Option<&PriceSeries> {
        self.companies.iter().find(|c| c.symbol == symbol)
    }

    pub fn symbols(&self) -> Vec<&str> {
        self.companies.iter().map(|c| c.symbol.as_str()).collect()
    }

    /// True when every member shares one date vector.
    pub fn is_aligned(&self) -> bool {
        let dates = self.market_index.dates();
        self.sector_index.dates() == dates && self.companies.iter().all(|c| c.dates() == dates)
    }

    /// Trading days of an aligned panel.
    pub fn dates(&self) -> &[NaiveDate] {
        self.market_index.dates()
    }

    pub fn len(&self) -> usize {
        self.market_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.market_index.is_empty()
    }
}

/// Restricts every series of the panel to the dates they all share.
pub fn align(panel: &MarketPanel) -> Result<MarketPanel> {
    if panel.companies.is_empty() {
        return Err(Error::Alignment("panel has no companies".into()));
    }
    let members = || {
        std::iter::once(&panel.market_index)
            .chain(std::iter::once(&panel.sector_index))
            .chain(panel.companies.iter())
    };
    if let Some(empty) = members().find(|s| s.is_empty()) {
        return Err(Error::Alignment(format!("series {} is empty", empty.symbol)));
    }
    let mut common: BTreeSet<NaiveDate> = panel.market_index.dates.iter().copied().collect();
    for s in members().skip(1) {
        let dates: BTreeSet<NaiveDate> = s.dates.iter().copied().collect();
        common = common.intersection(&dates).copied().collect();
    }
    if common.is_empty() {
        return Err(Error::Alignment("series share no common dates".into()));
    }
    Ok(MarketPanel {
        market_index: panel.market_index.restricted_to(&common),
        sector_index: panel.sector_index.restricted_to(&common),
        companies: panel.companies.iter().map(|c| c.restricted_to(&common)).collect(),
    })
}

/// Equal-weighted mean of the companies' closes on each date.
pub fn derive_sector_index(companies: &[PriceSeries]) -> Result<PriceSeries> {
    let first = companies
        .first()
        .ok_or_else(|| Error::Validation("cannot derive a sector index from zero companies".into()))?;
    if let Some(off) = companies.iter().find(|c| c.dates != first.dates) {
        return Err(Error::Alignment(format!(
            "{} is not aligned with {}",
            off.symbol, first.symbol
        )));
    }
    let n = companies.len() as f64;
    let closes = (0..first.len())
        .map(|i| companies.iter().map(|c| c.closes[i]).sum::<f64>() / n)
        .collect();
    PriceSeries::new("SECTOR", first.dates.clone(), closes)
}

/// Files making up a panel on disk. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelManifest {
    pub market_index: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sector_index: Option<PathBuf>,
    pub companies: Vec<PathBuf>,
}

impl PanelManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads and aligns every series. A missing sector index is derived from
    /// the companies after alignment.
    pub fn load(&self, base_dir: &Path) -> Result<MarketPanel> {
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            }
        };
        let market_index = read_price_csv(&resolve(&self.market_index))?;
        let companies = self
            .companies
            .iter()
            .map(|p| read_price_csv(&resolve(p)))
            .collect::<Result<Vec<_>>>()?;
        if companies.is_empty() {
            return Err(Error::Validation("manifest lists no companies".into()));
        }
        match &self.sector_index {
            Some(p) => {
                let sector_index = read_price_csv(&resolve(p))?;
                align(&MarketPanel {
                    market_index,
                    sector_index,
                    companies,
                })
            }
            None => {
                // Align without a sector index first, using the market index as a stand-in.
                let provisional = align(&MarketPanel {
                    sector_index: market_index.clone(),
                    market_index,
                    companies,
                })?;
                let sector_index = derive_sector_index(&provisional.companies)?;
                Ok(MarketPanel {
                    sector_index,
                    ..provisional
                })
            }
        }
    }
}

/// Chronological partition of a sample set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    /// Leading samples used for learning (train + validation).
    pub train_count: usize,
    /// Share of the learning block held out, taken from its tail.
    pub validation_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_count: 402,
            validation_fraction: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_count == 0 {
            return Err(Error::InvalidParameter("train_count must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return Err(Error::InvalidParameter(format!(
                "validation_fraction {} outside [0, 0.5]",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    /// Size of the training sub-block: floor(train_count * (1 - validation_fraction)).
    pub fn fit_count(&self) -> usize {
        // The epsilon absorbs representation error such as 10 * 0.8 = 7.999...
        let raw = self.train_count as f64 * (1.0 - self.validation_fraction);
        ((raw + 1e-9).floor() as usize).min(self.train_count)
    }
}

/// Train / validation / test blocks of a dataset, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: FeatureDataset,
    pub validation: FeatureDataset,
    pub test: FeatureDataset,
}

/// Splits chronologically: `[0, fit)` trains, `[fit, train_count)` validates,
/// the rest tests. Nothing is shuffled.
pub fn split(samples: &FeatureDataset, spec: &SplitSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let total = samples.len();
    if spec.train_count >= total {
        return Err(Error::InvalidParameter(format!(
            "train_count {} must be below the sample count {total}",
            spec.train_count
        )));
    }
    let fit = spec.fit_count();
    if fit == 0 {
        return Err(Error::InvalidParameter("training block is empty".into()));
    }
    Ok(DatasetSplit {
        train: samples.slice(0..fit),
        validation: samples.slice(fit..spec.train_count),
        test: samples.slice(spec.train_count..total),
    })
}
