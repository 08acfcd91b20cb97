//! Run configuration: one TOML document with a section per module.
//!
//! ```toml
//! seed = 42
//! output_dir = "out"
//!
//! [data]
//! manifest = "data/manifest.toml"   # omit to use the synthetic market
//!
//! [synth]
//! company_count = 10
//!
//! [features]
//! lag_count = 3
//! lag_stride = 5
//! horizon = 1
//!
//! [cs]
//! nest_count = 25
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ann::LmParams;
use crate::cart::CartParams;
use crate::cuckoo::CsParams;
use crate::ensemble::TrainParams;
use crate::error::{Error, Result};
use crate::eval::{self, BenchmarkConfig, SynthMarketParams};
use crate::features::FeatureConfig;
use crate::gpr::KernelParams;
use crate::market::{PanelManifest, MarketPanel, SplitSpec};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Panel manifest; the synthetic market is used when absent.
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GprConfig {
    pub length_scale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
    /// Pick length scale and noise by log marginal likelihood over a grid.
    pub grid_search: bool,
}

impl Default for GprConfig {
    fn default() -> Self {
        let k = KernelParams::default();
        Self {
            length_scale: k.length_scale,
            signal_variance: k.signal_variance,
            noise_variance: k.noise_variance,
            grid_search: false,
        }
    }
}

impl GprConfig {
    pub fn kernel(&self) -> KernelParams {
        KernelParams {
            length_scale: self.length_scale,
            signal_variance: self.signal_variance,
            noise_variance: self.noise_variance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds network initialization and the weight search.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub synth: SynthMarketParams,
    /// Lag layout and horizon used by `train` and `predict`.
    pub features: FeatureConfig,
    pub benchmark: BenchmarkConfig,
    pub split: SplitSpec,
    pub lm: LmParams,
    pub cart: CartParams,
    pub gpr: GprConfig,
    pub cs: CsParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: TrainParams::default().seed,
            output_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            synth: SynthMarketParams::default(),
            features: FeatureConfig::daily(),
            benchmark: BenchmarkConfig::default(),
            split: SplitSpec::default(),
            lm: LmParams::default(),
            cart: CartParams::default(),
            gpr: GprConfig::default(),
            cs: CsParams::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates a config file; a relative manifest path resolves
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.data.manifest = Some(base.join(m));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Overrides every seed, including the synthetic market's.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.data.manifest {
            if !m.is_file() {
                return Err(Error::Config(format!("manifest {} does not exist", m.display())));
            }
        }
        self.synth.validate()?;
        self.features.validate()?;
        self.benchmark.daily.validate()?;
        self.benchmark.weekly.validate()?;
        self.train_params().validate()
    }

    pub fn train_params(&self) -> TrainParams {
        TrainParams {
            split: self.split,
            lm: self.lm.clone(),
            cart: self.cart.clone(),
            kernel: self.gpr.kernel(),
            gpr_grid_search: self.gpr.grid_search,
            cs: self.cs.clone(),
            seed: self.seed,
        }
    }

    /// The manifest's panel, or the synthetic market when none is configured.
    pub fn load_panel(&self) -> Result<MarketPanel> {
        match &self.data.manifest {
            Some(path) => {
                let manifest = PanelManifest::read(path)?;
                manifest.load(path.parent().unwrap_or(Path::new(".")))
            }
            None => eval::generate_synth_market(&self.synth),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::from_toml(
            "seed = 9\n[features]\nlag_count = 5\nlag_stride = 7\nhorizon = 7\n[cs]\nnest_count = 30\n[gpr]\ngrid_search = true\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.features, FeatureConfig::weekly());
        assert_eq!(cfg.cs.nest_count, 30);
        let p = cfg.train_params();
        assert!(p.gpr_grid_search);
        assert_eq!(p.seed, 9);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 1"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[gpr]\nlengthscale = 2.0").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.cs.pa = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.data.manifest = Some(PathBuf::from("/nonexistent/manifest.toml"));
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
