//! Weighted-ensemble forecasting of daily stock closes.
//!
//! The pipeline builds technical-indicator feature vectors from aligned daily
//! price series ([`features`]), trains three regressors (a small neural
//! network [`ann`], a pruned regression tree [`cart`], and a Gaussian process
//! [`gpr`]), and combines their forecasts with weights found by
//! [`cuckoo`] search ([`ensemble`]). [`eval`] provides metrics, a synthetic
//! market generator, and the benchmark/report driver.

pub mod ann;
pub mod cart;
pub mod config;
pub mod cuckoo;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod features;
pub mod gpr;
pub mod market;

pub use error::{Error, Result};
