//! Feed-forward regressor with two log-sigmoid hidden layers (10 and 7 units)
//! and a linear output, trained by full-batch Levenberg-Marquardt.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HIDDEN1: usize = 10;
pub const HIDDEN2: usize = 7;

#[inline]
fn logsig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Network weights. Matrices are row-major, one row per receiving unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnModel {
    pub input_dim: usize,
    pub seed: u64,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: f64,
}

/// Activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub hidden1: [f64; HIDDEN1],
    pub hidden2: [f64; HIDDEN2],
    pub output: f64,
}

impl AnnModel {
    /// Uniform `[-0.5, 0.5]` initialization, deterministic per seed.
    pub fn init(input_dim: usize, seed: u64) -> Result<Self> {
        if input_dim < 1 {
            return Err(Error::InvalidParameter("input_dim must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-0.5..=0.5)).collect::<Vec<f64>>();
        let w1 = draw(HIDDEN1 * input_dim);
        let b1 = draw(HIDDEN1);
        let w2 = draw(HIDDEN2 * HIDDEN1);
        let b2 = draw(HIDDEN2);
        let w3 = draw(HIDDEN2);
        let b3 = draw(1)[0];
        Ok(Self {
            input_dim,
            seed,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        })
    }

    pub fn param_count(&self) -> usize {
        HIDDEN1 * (self.input_dim + 1) + HIDDEN2 * (HIDDEN1 + 1) + HIDDEN2 + 1
    }

    /// Flattened parameters in the order w1, b1, w2, b2, w3, b3.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        p.extend_from_slice(&self.w1);
        p.extend_from_slice(&self.b1);
        p.extend_from_slice(&self.w2);
        p.extend_from_slice(&self.b2);
        p.extend_from_slice(&self.w3);
        p.push(self.b3);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count(), "parameter vector length");
        let mut rest = p;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        self.w1 = take(HIDDEN1 * self.input_dim);
        self.b1 = take(HIDDEN1);
        self.w2 = take(HIDDEN2 * HIDDEN1);
        self.b2 = take(HIDDEN2);
        self.w3 = take(HIDDEN2);
        self.b3 = take(1)[0];
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn activations(&self, x: &[f64]) -> Result<Activations> {
        self.check_dim(x)?;
        Ok(self.activations_unchecked(x))
    }

    fn activations_unchecked(&self, x: &[f64]) -> Activations {
        let d = self.input_dim;
        let mut hidden1 = [0.0; HIDDEN1];
        for (k, h) in hidden1.iter_mut().enumerate() {
            let row = &self.w1[k * d..(k + 1) * d];
            let z = self.b1[k] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            *h = logsig(z);
        }
        let mut hidden2 = [0.0; HIDDEN2];
        for (j, h) in hidden2.iter_mut().enumerate() {
            let row = &self.w2[j * HIDDEN1..(j + 1) * HIDDEN1];
            let z = self.b2[j] + row.iter().zip(&hidden1).map(|(w, v)| w * v).sum::<f64>();
            *h = logsig(z);
        }
        let output = self.b3 + self.w3.iter().zip(&hidden2).map(|(w, v)| w * v).sum::<f64>();
        Activations {
            hidden1,
            hidden2,
            output,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        Ok(self.activations(x)?.output)
    }

    /// Gradient of the network output with respect to `params()` at `x`.
    pub fn output_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut row = vec![0.0; self.param_count()];
        self.fill_gradient(x, &mut row);
        Ok(row)
    }

    fn fill_gradient(&self, x: &[f64], row: &mut [f64]) {
        let d = self.input_dim;
        let a = self.activations_unchecked(x);
        let off_b1 = HIDDEN1 * d;
        let off_w2 = off_b1 + HIDDEN1;
        let off_b2 = off_w2 + HIDDEN2 * HIDDEN1;
        let off_w3 = off_b2 + HIDDEN2;
        let off_b3 = off_w3 + HIDDEN2;

        row[off_b3] = 1.0;
        let mut delta2 = [0.0; HIDDEN2];
        for j in 0..HIDDEN2 {
            let h = a.hidden2[j];
            row[off_w3 + j] = h;
            delta2[j] = self.w3[j] * h * (1.0 - h);
            row[off_b2 + j] = delta2[j];
            for k in 0..HIDDEN1 {
                row[off_w2 + j * HIDDEN1 + k] = delta2[j] * a.hidden1[k];
            }
        }
        for k in 0..HIDDEN1 {
            let h = a.hidden1[k];
            let back: f64 = (0..HIDDEN2).map(|j| delta2[j] * self.w2[j * HIDDEN1 + k]).sum();
            let delta1 = back * h * (1.0 - h);
            row[off_b1 + k] = delta1;
            for (i, xi) in x.iter().enumerate() {
                row[k * d + i] = delta1 * xi;
            }
        }
    }

    /// Mean squared error over a dataset.
    pub fn mse(&self, xs: &[Vec<f64>], ys: &[f64]) -> Result<f64> {
        let mut s = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            let e = y - self.forward(x)?;
            s += e * e;
        }
        Ok(s / xs.len().max(1) as f64)
    }
}

/// Damping schedule and stopping rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmParams {
    pub mu_init: f64,
    pub mu_up: f64,
    pub mu_down: f64,
    pub max_epochs: usize,
    pub gradient_tol: f64,
    pub mu_max: f64,
}

impl Default for LmParams {
    fn default() -> Self {
        Self {
            mu_init: 1e-3,
            mu_up: 10.0,
            mu_down: 0.1,
            max_epochs: 200,
            gradient_tol: 1e-7,
            mu_max: 1e10,
        }
    }
}

impl LmParams {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [self.mu_init, self.mu_up, self.mu_down, self.gradient_tol, self.mu_max]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !all_positive {
            return Err(Error::InvalidParameter("LM parameters must be positive".into()));
        }
        if !(self.mu_down < 1.0 && 1.0 < self.mu_up) {
            return Err(Error::InvalidParameter("LM requires mu_down < 1 < mu_up".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    GradientTolerance,
    DampingLimit,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AnnModel,
    /// Training MSE after each accepted step.
    pub trace: Vec<f64>,
    pub stop: StopReason,
}

/// Levenberg-Marquardt on the squared error of the network output.
///
/// Each epoch solves `(J^T J + mu I) delta = J^T e` for the current damping;
/// a step is accepted only if it does not raise the MSE, otherwise `mu` grows
/// by `mu_up` and the solve is repeated. When `mu` passes `mu_max` training
/// stops with the best model found.
pub fn train_lm(model: &AnnModel, xs: &[Vec<f64>], ys: &[f64], params: &LmParams) -> Result<TrainOutcome> {
    params.validate()?;
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::Validation(format!(
            "LM needs a nonempty training set with matching targets ({} inputs, {} targets)",
            xs.len(),
            ys.len()
        )));
    }
    for x in xs {
        model.check_dim(x)?;
    }
    let mut model = model.clone();
    let mut loss = model.mse(xs, ys)?;
    if !loss.is_finite() {
        return Err(Error::TrainingDiverged(format!("initial loss is {loss}")));
    }

    let n = xs.len();
    let p = model.param_count();
    let mut jac = DMatrix::<f64>::zeros(n, p);
    let mut row = vec![0.0; p];
    let mut mu = params.mu_init;
    let mut trace = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    for _ in 0..params.max_epochs {
        let mut err = DVector::<f64>::zeros(n);
        for (i, (x, y)) in xs.iter().zip(ys).enumerate() {
            row.iter_mut().for_each(|v| *v = 0.0);
            model.fill_gradient(x, &mut row);
            for (c, v) in row.iter().enumerate() {
                jac[(i, c)] = *v;
            }
            err[i] = y - model.activations_unchecked(x).output;
        }
        let jte = jac.tr_mul(&err);
        if 2.0 * jte.norm() / n as f64 <= params.gradient_tol {
            stop = StopReason::GradientTolerance;
            break;
        }
        let jtj = jac.tr_mul(&jac);
        let theta = DVector::from_vec(model.params());

        let mut accepted = false;
        while mu <= params.mu_max {
            let mut a = jtj.clone();
            for d in 0..p {
                a[(d, d)] += mu;
            }
            if let Some(chol) = a.cholesky() {
                let step = chol.solve(&jte);
                let mut candidate = model.clone();
                candidate.set_params((&theta + &step).as_slice());
                let new_loss = candidate.mse(xs, ys)?;
                if new_loss.is_finite() && new_loss <= loss {
                    model = candidate;
                    loss = new_loss;
                    mu = (mu * params.mu_down).max(f64::MIN_POSITIVE);
                    accepted = true;
                    break;
                }
            }
            mu *= params.mu_up;
        }
        if !accepted {
            stop = StopReason::DampingLimit;
            break;
        }
        trace.push(loss);
    }
    Ok(TrainOutcome { model, trace, stop })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeroed(input_dim: usize) -> AnnModel {
        let mut m = AnnModel::init(input_dim, 0).unwrap();
        let zeros = vec![0.0; m.param_count()];
        m.set_params(&zeros);
        m
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = AnnModel::init(11, 7).unwrap();
        let b = AnnModel::init(11, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.w1.len(), 10 * 11);
        assert_eq!(a.w2.len(), 7 * 10);
        assert_eq!(a.w3.len(), 7);
        assert!(a.params().iter().all(|v| (-0.5..=0.5).contains(v)));
        assert_ne!(a, AnnModel::init(11, 8).unwrap());
        assert!(AnnModel::init(0, 1).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let m = zeroed(4);
        let a = m.activations(&[0.3, 0.1, 0.9, 0.5]).unwrap();
        assert!(a.hidden1.iter().chain(&a.hidden2).all(|&h| h == 0.5));
        assert_eq!(a.output, 0.0);
    }

    #[test]
    fn output_bias_passes_through() {
        let mut m = AnnModel::init(3, 5).unwrap();
        m.w3 = vec![0.0; HIDDEN2];
        m.b3 = 7.0;
        assert_eq!(m.forward(&[0.1, 0.2, 0.3]).unwrap(), 7.0);
        assert_eq!(m.forward(&[1.0, 0.0, 1.0]).unwrap(), 7.0);
        assert!(matches!(m.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn max_epochs_zero_is_noop() {
        let m = AnnModel::init(2, 3).unwrap();
        let xs = vec![vec![0.1, 0.2], vec![0.3, 0.4]];
        let out = train_lm(&m, &xs, &[0.1, 0.2], &LmParams { max_epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(out.model, m);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn fits_constant_target() {
        let xs: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 / 49.0, ((i * 7) % 50) as f64 / 49.0]).collect();
        let ys = vec![0.5; 50];
        let m = AnnModel::init(2, 11).unwrap();
        let out = train_lm(&m, &xs, &ys, &LmParams::default()).unwrap();
        assert!(out.model.mse(&xs, &ys).unwrap() < 1e-4);
    }

    #[test]
    fn rejects_empty_or_mismatched_data() {
        let m = AnnModel::init(2, 3).unwrap();
        assert!(train_lm(&m, &[], &[], &LmParams::default()).is_err());
        assert!(train_lm(&m, &[vec![0.0]], &[0.0], &LmParams::default()).is_err());
        assert!(train_lm(&m, &[vec![0.0, 0.0]], &[f64::NAN], &LmParams::default()).is_err());
    }
}
