//! Exact Gaussian-process regression with an isotropic squared-exponential
//! kernel and Gaussian observation noise.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_JITTER: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelParams {
    pub length_scale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            length_scale: 1.0,
            signal_variance: 1.0,
            noise_variance: 0.01,
        }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.length_scale, self.signal_variance, self.noise_variance]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "kernel parameters must be positive: {self:?}"
            )))
        }
    }

    /// `signal_variance * exp(-|a - b|^2 / (2 length_scale^2))`
    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.signal_variance * (-d2 / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

/// Persisted form; the factorization is rebuilt on load.
#[derive(Serialize, Deserialize)]
struct GprRecord {
    kernel: KernelParams,
    prior_mean: f64,
    jitter: f64,
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    alpha: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GprModel {
    kernel: KernelParams,
    prior_mean: f64,
    /// Diagonal added beyond the noise variance to obtain a factorization.
    jitter: f64,
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    alpha: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl PartialEq for GprModel {
    fn eq(&self, other: &Self) -> bool {
        self.kernel == other.kernel
            && self.prior_mean == other.prior_mean
            && self.jitter == other.jitter
            && self.inputs == other.inputs
            && self.targets == other.targets
            && self.alpha == other.alpha
    }
}

impl Serialize for GprModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GprRecord {
            kernel: self.kernel,
            prior_mean: self.prior_mean,
            jitter: self.jitter,
            inputs: self.inputs.clone(),
            targets: self.targets.clone(),
            alpha: self.alpha.as_slice().to_vec(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GprModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = GprRecord::deserialize(d)?;
        let gram = gram_matrix(&r.kernel, &r.inputs, r.kernel.noise_variance + r.jitter);
        let chol = gram
            .cholesky()
            .ok_or_else(|| serde::de::Error::custom("stored GP covariance is not positive definite"))?;
        if r.alpha.len() != r.inputs.len() || r.targets.len() != r.inputs.len() {
            return Err(serde::de::Error::custom("GP record lengths disagree"));
        }
        Ok(Self {
            kernel: r.kernel,
            prior_mean: r.prior_mean,
            jitter: r.jitter,
            inputs: r.inputs,
            targets: r.targets,
            alpha: DVector::from_vec(r.alpha),
            chol,
        })
    }
}

fn gram_matrix(kernel: &KernelParams, xs: &[Vec<f64>], diag: f64) -> DMatrix<f64> {
    let n = xs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = kernel.kernel(&xs[i], &xs[i]) + diag;
        for j in 0..i {
            let v = kernel.kernel(&xs[i], &xs[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

impl GprModel {
    /// Zero-mean fit.
    pub fn fit(xs: &[Vec<f64>], ys: &[f64], kernel: &KernelParams) -> Result<Self> {
        Self::fit_with_prior_mean(xs, ys, kernel, 0.0)
    }

    /// Fit with a constant prior mean: targets are centered by `prior_mean`
    /// and predictions add it back.
    pub fn fit_with_prior_mean(xs: &[Vec<f64>], ys: &[f64], kernel: &KernelParams, prior_mean: f64) -> Result<Self> {
        kernel.validate()?;
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::Validation(format!(
                "GP needs a nonempty training set with matching targets ({} inputs, {} targets)",
                xs.len(),
                ys.len()
            )));
        }
        let dim = xs[0].len();
        if let Some(bad) = xs.iter().find(|x| x.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: bad.len(),
            });
        }
        if xs.iter().flatten().chain(ys).any(|v| !v.is_finite()) || !prior_mean.is_finite() {
            return Err(Error::Validation("GP training data must be finite".into()));
        }

        let base = gram_matrix(kernel, xs, kernel.noise_variance);
        let mut jitter = 0.0;
        let chol = loop {
            let mut k = base.clone();
            if jitter > 0.0 {
                for i in 0..k.nrows() {
                    k[(i, i)] += jitter;
                }
            }
            if let Some(c) = k.cholesky() {
                break c;
            }
            jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
            if jitter > MAX_JITTER {
                return Err(Error::GpFit(format!(
                    "covariance is not positive definite even with jitter {MAX_JITTER:e}; \
                     increase noise_variance (currently {})",
                    kernel.noise_variance
                )));
            }
        };
        let centered = DVector::from_iterator(ys.len(), ys.iter().map(|y| y - prior_mean));
        let alpha = chol.solve(&centered);
        Ok(Self {
            kernel: *kernel,
            prior_mean,
            jitter,
            inputs: xs.to_vec(),
            targets: ys.to_vec(),
            alpha,
            chol,
        })
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn alpha(&self) -> &[f64] {
        self.alpha.as_slice()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    fn cross_covariance(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(DVector::from_iterator(
            self.inputs.len(),
            self.inputs.iter().map(|xi| self.kernel.kernel(x, xi)),
        ))
    }

    pub fn predict_mean(&self, x: &[f64]) -> Result<f64> {
        Ok(self.prior_mean + self.cross_covariance(x)?.dot(&self.alpha))
    }

    /// Posterior mean and variance of the latent function at `x`.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        let ks = self.cross_covariance(x)?;
        let mean = self.prior_mean + ks.dot(&self.alpha);
        let v = self
            .chol
            .l()
            .solve_lower_triangular(&ks)
            .expect("Cholesky factor has a nonzero diagonal");
        let var = self.kernel.kernel(x, x) - v.dot(&v);
        Ok((mean, var.max(0.0)))
    }

    /// `-y^T alpha / 2 - log|K + noise I| / 2 - n log(2 pi) / 2`, with `y`
    /// centered by the prior mean.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.targets.len();
        let fit: f64 = self
            .targets
            .iter()
            .zip(self.alpha.iter())
            .map(|(y, a)| (y - self.prior_mean) * a)
            .sum();
        let l = self.chol.l_dirty();
        let half_log_det: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
        -0.5 * fit - half_log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Candidate values for the coarse evidence search.
pub const LENGTH_SCALE_GRID: [f64; 5] = [0.3, 0.5, 1.0, 2.0, 4.0];
pub const NOISE_VARIANCE_GRID: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

/// Fits every (length scale, noise variance) pair of the grids and keeps the
/// model with the highest log marginal likelihood. Signal variance is held.
pub fn fit_grid_search(xs: &[Vec<f64>], ys: &[f64], base: &KernelParams, prior_mean: f64) -> Result<GprModel> {
    let mut best: Option<(f64, GprModel)> = None;
    let mut last_err = None;
    for &length_scale in &LENGTH_SCALE_GRID {
        for &noise_variance in &NOISE_VARIANCE_GRID {
            let k = KernelParams {
                length_scale,
                noise_variance,
                ..*base
            };
            match GprModel::fit_with_prior_mean(xs, ys, &k, prior_mean) {
                Ok(m) => {
                    let lml = m.log_marginal_likelihood();
                    if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                        best = Some((lml, m));
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
    }
    best.map(|(_, m)| m)
        .ok_or_else(|| last_err.unwrap_or_else(|| Error::GpFit("empty hyperparameter grid".into())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_point_alpha() {
        let k = KernelParams::default();
        let m = GprModel::fit(&[vec![0.2, 0.4]], &[3.0], &k).unwrap();
        assert_abs_diff_eq!(m.alpha()[0], 3.0 / (1.0 + 0.01), epsilon = 1e-14);
    }

    #[test]
    fn duplicate_points_regularized() {
        let xs = vec![vec![0.5], vec![0.5], vec![0.1]];
        let m = GprModel::fit(&xs, &[1.0, 1.0, 0.0], &KernelParams::default()).unwrap();
        assert!(m.predict(&[0.5]).unwrap().0.is_finite());
    }

    #[test]
    fn zero_targets_zero_alpha() {
        let xs = vec![vec![0.0], vec![0.4], vec![0.9]];
        let m = GprModel::fit(&xs, &[0.0; 3], &KernelParams::default()).unwrap();
        assert!(m.alpha().iter().all(|a| *a == 0.0));
    }

    #[test]
    fn near_interpolation() {
        let xs = vec![vec![0.0], vec![0.5], vec![1.0]];
        let ys = [0.3, -0.2, 0.8];
        let k = KernelParams { length_scale: 0.3, noise_variance: 1e-8, ..Default::default() };
        let m = GprModel::fit(&xs, &ys, &k).unwrap();
        for (x, y) in xs.iter().zip(ys) {
            assert!((m.predict(x).unwrap().0 - y).abs() < 1e-4);
        }
    }

    #[test]
    fn far_field_reverts_to_prior() {
        let xs = vec![vec![0.0, 0.0], vec![0.1, 0.3]];
        let m = GprModel::fit(&xs, &[1.0, 2.0], &KernelParams::default()).unwrap();
        let (mean, var) = m.predict(&[100.0, 100.0]).unwrap();
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-12);

        let shifted = GprModel::fit_with_prior_mean(&xs, &[1.0, 2.0], &KernelParams::default(), 0.5).unwrap();
        assert_abs_diff_eq!(shifted.predict(&[100.0, 100.0]).unwrap().0, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn single_point_log_likelihood() {
        let k = KernelParams::default();
        let m = GprModel::fit(&[vec![1.0]], &[0.0], &k).unwrap();
        let expected = -0.5 * (1.0f64 + 0.01).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_abs_diff_eq!(m.log_marginal_likelihood(), expected, epsilon = 1e-14);
    }

    #[test]
    fn inflated_noise_lowers_evidence() {
        let xs: Vec<Vec<f64>> = (0..15).map(|i| vec![i as f64 / 14.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x[0]).sin()).collect();
        let tight = GprModel::fit(&xs, &ys, &KernelParams { noise_variance: 1e-4, ..Default::default() }).unwrap();
        let loose = GprModel::fit(&xs, &ys, &KernelParams { noise_variance: 10.0, ..Default::default() }).unwrap();
        assert!(tight.log_marginal_likelihood() > loose.log_marginal_likelihood());
    }

    #[test]
    fn grid_search_picks_maximum_evidence() {
        let xs: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 / 11.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x[0] * x[0]).collect();
        let best = fit_grid_search(&xs, &ys, &KernelParams::default(), 0.0).unwrap();
        for &l in &LENGTH_SCALE_GRID {
            for &n in &NOISE_VARIANCE_GRID {
                let k = KernelParams { length_scale: l, noise_variance: n, ..Default::default() };
                let m = GprModel::fit(&xs, &ys, &k).unwrap();
                assert!(m.log_marginal_likelihood() <= best.log_marginal_likelihood());
            }
        }
    }

    #[test]
    fn errors() {
        let m = GprModel::fit(&[vec![0.0, 1.0]], &[1.0], &KernelParams::default()).unwrap();
        assert!(matches!(m.predict(&[0.0]), Err(Error::DimensionMismatch { .. })));
        assert!(GprModel::fit(&[], &[], &KernelParams::default()).is_err());
        let bad = KernelParams { noise_variance: 0.0, ..Default::default() };
        assert!(GprModel::fit(&[vec![0.0]], &[1.0], &bad).is_err());
    }

    #[test]
    fn serde_round_trip_rebuilds_factor() {
        let xs = vec![vec![0.0], vec![0.5], vec![1.0]];
        let m = GprModel::fit(&xs, &[0.1, 0.2, 0.3], &KernelParams::default()).unwrap();
        let back: GprModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.predict(&[0.3]).unwrap(), m.predict(&[0.3]).unwrap());
    }
}
