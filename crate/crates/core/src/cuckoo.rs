//! Cuckoo search: a bounded, derivative-free maximizer.
//!
//! Every iteration draws one Lévy-flight cuckoo from the current best nest,
//! lets it replace a randomly chosen nest if it is fitter, and then abandons
//! the worst share of nests in favor of fresh uniform samples. The best nest is
//! never abandoned, so the best fitness never decreases.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsParams {
    pub nest_count: usize,
    /// Fraction of nests abandoned per iteration.
    pub pa: f64,
    pub max_iters: usize,
    pub levy_beta: f64,
    /// Lévy step multiplier as a fraction of each coordinate's box width.
    pub step_scale: f64,
    pub seed: u64,
}

impl Default for CsParams {
    fn default() -> Self {
        Self {
            nest_count: 25,
            pa: 0.25,
            max_iters: 200,
            levy_beta: 1.5,
            step_scale: 0.01,
            seed: 0,
        }
    }
}

impl CsParams {
    pub fn validate(&self) -> Result<()> {
        if self.nest_count < 2 {
            return Err(Error::InvalidParameter("nest_count must be at least 2".into()));
        }
        if !(self.pa > 0.0 && self.pa < 1.0) {
            return Err(Error::InvalidParameter(format!("pa {} outside (0, 1)", self.pa)));
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        check_beta(self.levy_beta)?;
        if !(self.step_scale.is_finite() && self.step_scale > 0.0) {
            return Err(Error::InvalidParameter("step_scale must be positive".into()));
        }
        Ok(())
    }

    /// Nests regenerated per iteration, never including the best one.
    pub fn abandon_count(&self) -> usize {
        ((self.pa * self.nest_count as f64).ceil() as usize).min(self.nest_count - 1)
    }

    /// Upper bound on fitness evaluations for one run.
    pub fn evaluation_budget(&self) -> usize {
        self.nest_count + self.max_iters * (1 + self.abandon_count())
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 1.0 && beta <= 2.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("Lévy exponent {beta} outside (1, 2]")))
    }
}

/// Axis-aligned search box.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::InvalidParameter("bounds must be nonempty and of equal length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u)) {
            return Err(Error::InvalidParameter("every lower bound must be finite and <= its upper bound".into()));
        }
        Ok(Self { lower, upper })
    }

    /// The unit cube `[0, 1]^dim`.
    pub fn unit(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    fn clamp(&self, x: &mut [f64]) {
        for (v, (l, u)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*l, *u);
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| l + rng.random::<f64>() * (u - l))
            .collect()
    }
}

/// Mantegna's scale for the numerator Gaussian of a Lévy step.
pub fn mantegna_sigma(beta: f64) -> f64 {
    let num = libm::tgamma(1.0 + beta) * (std::f64::consts::PI * beta / 2.0).sin();
    let den = libm::tgamma((1.0 + beta) / 2.0) * beta * 2f64.powf((beta - 1.0) / 2.0);
    (num / den).powf(1.0 / beta)
}

/// Heavy-tailed step `u / |v|^(1/beta)` per coordinate, `u ~ N(0, sigma^2)`,
/// `v ~ N(0, 1)`.
pub fn levy_step<R: Rng>(dim: usize, beta: f64, rng: &mut R) -> Result<Vec<f64>> {
    if dim < 1 {
        return Err(Error::InvalidParameter("Lévy step dimension must be at least 1".into()));
    }
    check_beta(beta)?;
    let sigma = mantegna_sigma(beta);
    Ok((0..dim)
        .map(|_| {
            let u: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
            let v: f64 = rng.sample(StandardNormal);
            u / v.abs().powf(1.0 / beta)
        })
        .collect())
}

/// Best and mean fitness of the population after one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub best: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsResult {
    pub best_solution: Vec<f64>,
    pub best_fitness: f64,
    pub history: Vec<IterationStats>,
    pub evaluations: usize,
}

impl CsResult {
    /// `iteration,best,mean` rows, iterations counted from 1.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("iteration,best,mean\n");
        for (i, h) in self.history.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", i + 1, h.best, h.mean);
        }
        out
    }
}

fn rng_for(params: &CsParams, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(stream);
    rng
}

/// Initial nests: `seeds` first, the rest uniform in the box (deterministic
/// per `params.seed`).
pub fn seed_population(params: &CsParams, bounds: &Bounds, seeds: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    params.validate()?;
    if seeds.len() > params.nest_count {
        return Err(Error::InvalidParameter(format!(
            "{} seeds exceed nest_count {}",
            seeds.len(),
            params.nest_count
        )));
    }
    if let Some(bad) = seeds.iter().find(|s| !bounds.contains(s)) {
        return Err(Error::InvalidParameter(format!("seed {bad:?} lies outside the search box")));
    }
    let mut rng = rng_for(params, 0);
    let mut population = seeds.to_vec();
    while population.len() < params.nest_count {
        population.push(bounds.sample(&mut rng));
    }
    Ok(population)
}

/// Maximizes `fitness` over `bounds` from a fully random population.
pub fn optimize<F>(fitness: F, bounds: &Bounds, params: &CsParams) -> Result<CsResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let population = seed_population(params, bounds, &[])?;
    optimize_from(fitness, bounds, params, population)
}

/// Maximizes `fitness` starting from a given population of `nest_count` nests.
pub fn optimize_from<F>(mut fitness: F, bounds: &Bounds, params: &CsParams, mut nests: Vec<Vec<f64>>) -> Result<CsResult>
where
    F: FnMut(&[f64]) -> f64,
{
    params.validate()?;
    if nests.len() != params.nest_count {
        return Err(Error::InvalidParameter(format!(
            "population has {} nests, expected {}",
            nests.len(),
            params.nest_count
        )));
    }
    if let Some(bad) = nests.iter().find(|x| !bounds.contains(x)) {
        return Err(Error::InvalidParameter(format!("nest {bad:?} lies outside the search box")));
    }

    let mut evaluations = 0usize;
    let mut evaluate = |x: &[f64]| -> Result<f64> {
        evaluations += 1;
        let f = fitness(x);
        if f.is_finite() {
            Ok(f)
        } else {
            Err(Error::NonFiniteFitness { point: x.to_vec() })
        }
    };

    let mut scores = nests.iter().map(|x| evaluate(x)).collect::<Result<Vec<f64>>>()?;
    let mut rng = rng_for(params, 1);
    let widths: Vec<f64> = bounds.upper.iter().zip(&bounds.lower).map(|(u, l)| u - l).collect();
    let abandon = params.abandon_count();
    let n = params.nest_count;

    let argmax = |scores: &[f64]| {
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        best
    };
    let first = argmax(&scores);
    let mut best_solution = nests[first].clone();
    let mut best_fitness = scores[first];
    let mut history = Vec::with_capacity(params.max_iters);

    for _ in 0..params.max_iters {
        // Lévy flight from the current best nest.
        let home = argmax(&scores);
        let step = levy_step(bounds.dim(), params.levy_beta, &mut rng)?;
        let mut cuckoo: Vec<f64> = nests[home]
            .iter()
            .zip(step.iter().zip(&widths))
            .map(|(x, (s, w))| x + params.step_scale * w * s)
            .collect();
        bounds.clamp(&mut cuckoo);
        let f_cuckoo = evaluate(&cuckoo)?;
        if f_cuckoo > best_fitness {
            best_fitness = f_cuckoo;
            best_solution = cuckoo.clone();
        }
        let j = rng.random_range(0..n);
        if f_cuckoo > scores[j] {
            nests[j] = cuckoo;
            scores[j] = f_cuckoo;
        }

        // Abandon the worst nests, sparing the best.
        let keep = argmax(&scores);
        let mut order: Vec<usize> = (0..n).filter(|&i| i != keep).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        for &i in order.iter().take(abandon) {
            nests[i] = bounds.sample(&mut rng);
            scores[i] = evaluate(&nests[i])?;
            if scores[i] > best_fitness {
                best_fitness = scores[i];
                best_solution = nests[i].clone();
            }
        }

        let mean = scores.iter().sum::<f64>() / n as f64;
        history.push(IterationStats {
            best: best_fitness,
            mean,
        });
    }

    Ok(CsResult {
        best_solution,
        best_fitness,
        history,
        evaluations,
    })
}
