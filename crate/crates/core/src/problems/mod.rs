//! Synthetic empirical-risk problems with exact gradients.
//!
//! Every problem is a finite sum `F(w) = (1/D) * sum_e f_e(w)` over `D`
//! samples. Workers own disjoint shards of the sample indices and draw
//! minibatches from their shard.

mod logistic;
mod mlp;
mod quadratic;

pub use logistic::{make_logistic, Logistic, LogisticSpec};
pub use mlp::{make_tiny_mlp, MlpSpec, TinyMlp};
pub use quadratic::{make_quadratic, Quadratic, QuadraticSpec};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{mix_seed, squared_norm};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("invalid problem shape: {0}")]
    InvalidShape(String),
    #[error("margin must be positive, got {0}")]
    DegenerateMargin(f64),
    #[error("{samples} samples cannot feed {processes} workers with batch size {batch}")]
    TooFewSamples {
        samples: usize,
        processes: usize,
        batch: usize,
    },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

/// A finite-sum objective.
pub trait Problem: Send + Sync {
    fn name(&self) -> &'static str;

    fn dim(&self) -> usize;

    fn num_samples(&self) -> usize;

    fn initial_point(&self) -> Vec<f64>;

    fn sample_loss(&self, sample: usize, w: &[f64]) -> f64;

    /// Adds `grad f_sample(w)` to `out`.
    fn add_sample_gradient(&self, sample: usize, w: &[f64], out: &mut [f64]);

    /// Full objective `F(w)`.
    fn loss(&self, w: &[f64]) -> f64 {
        let n = self.num_samples();
        (0..n).map(|e| self.sample_loss(e, w)).sum::<f64>() / n as f64
    }

    /// Full gradient, written into `out`.
    fn gradient(&self, w: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let n = self.num_samples();
        for e in 0..n {
            self.add_sample_gradient(e, w, out);
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|g| *g *= inv);
    }

    fn optimum(&self) -> Option<&[f64]> {
        None
    }

    fn optimal_loss(&self) -> Option<f64> {
        None
    }

    /// Lipschitz constant of the full gradient, when known exactly.
    fn lipschitz(&self) -> Option<f64> {
        None
    }

    /// Training accuracy for classification problems.
    fn accuracy(&self, _w: &[f64]) -> Option<f64> {
        None
    }
}

/// Serializable description of a problem; the data is regenerated from
/// `(spec, seed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    Quadratic(QuadraticSpec),
    Logistic(LogisticSpec),
    TinyMlp(MlpSpec),
}

impl ProblemSpec {
    pub fn build(&self, seed: u64) -> Result<Box<dyn Problem>, ProblemError> {
        let seed = mix_seed(seed, 0x9e0b);
        Ok(match self {
            ProblemSpec::Quadratic(spec) => Box::new(spec.build(seed)?),
            ProblemSpec::Logistic(spec) => Box::new(spec.build(seed)?),
            ProblemSpec::TinyMlp(spec) => Box::new(spec.build(seed)?),
        })
    }

    pub fn samples(&self) -> usize {
        match self {
            ProblemSpec::Quadratic(s) => s.samples,
            ProblemSpec::Logistic(s) => s.samples,
            ProblemSpec::TinyMlp(s) => s.samples,
        }
    }

    /// Checks the spec against the worker count and batch size.
    pub fn validate(&self, processes: usize, batch: usize) -> Result<(), ProblemError> {
        match self {
            ProblemSpec::Quadratic(s) => s.validate()?,
            ProblemSpec::Logistic(s) => s.validate()?,
            ProblemSpec::TinyMlp(s) => s.validate()?,
        }
        let samples = self.samples();
        let needs_full_batches = matches!(self, ProblemSpec::Logistic(_));
        if samples < processes || (needs_full_batches && samples < processes * batch) {
            return Err(ProblemError::TooFewSamples {
                samples,
                processes,
                batch,
            });
        }
        Ok(())
    }
}

/// Disjoint shards of `0..samples`, one per worker, assigned by a seeded
/// shuffle. Shard sizes differ by at most one.
pub fn partition(samples: usize, processes: usize, seed: u64) -> Result<Vec<Vec<usize>>, ProblemError> {
    if processes == 0 || samples < processes {
        return Err(ProblemError::TooFewSamples {
            samples,
            processes,
            batch: 1,
        });
    }
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5a4d)));
    let base = samples / processes;
    let extra = samples % processes;
    let mut shards = Vec::with_capacity(processes);
    let mut start = 0;
    for i in 0..processes {
        let len = base + usize::from(i < extra);
        shards.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(shards)
}

/// Sample indices of one minibatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

impl Batch {
    /// `size` draws with replacement from `shard`.
    pub fn draw<R: Rng + ?Sized>(shard: &[usize], size: usize, rng: &mut R) -> Batch {
        Batch {
            indices: (0..size).map(|_| shard[rng.random_range(0..shard.len())]).collect(),
        }
    }

    /// One epoch over `shard` without replacement, split into batches of
    /// `size` (the last one may be shorter).
    pub fn epoch<R: Rng + ?Sized>(shard: &[usize], size: usize, rng: &mut R) -> Vec<Batch> {
        let mut order = shard.to_vec();
        order.shuffle(rng);
        order
            .chunks(size.max(1))
            .map(|c| Batch { indices: c.to_vec() })
            .collect()
    }

    /// Mean gradient over the batch, written into `out`.
    pub fn gradient(&self, problem: &dyn Problem, w: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for &e in &self.indices {
            problem.add_sample_gradient(e, w, out);
        }
        let inv = 1.0 / self.indices.len() as f64;
        out.iter_mut().for_each(|g| *g *= inv);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub passed: bool,
}

/// Compares the analytic full gradient with central differences.
pub fn finite_diff_check(problem: &dyn Problem, point: &[f64], step: f64, tol: f64) -> Result<FiniteDiffReport, ProblemError> {
    if !(step > 0.0) {
        return Err(ProblemError::InvalidStep(step));
    }
    let mut analytic = vec![0.0; problem.dim()];
    problem.gradient(point, &mut analytic);
    let mut probe = point.to_vec();
    let mut max_rel_error: f64 = 0.0;
    let mut worst_coordinate = 0;
    for j in 0..point.len() {
        let orig = probe[j];
        // Divide by the representable step, not the nominal one.
        let (hi, lo) = (orig + step, orig - step);
        probe[j] = hi;
        let up = problem.loss(&probe);
        probe[j] = lo;
        let down = problem.loss(&probe);
        probe[j] = orig;
        let numeric = (up - down) / (hi - lo);
        let a = analytic[j];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if err > max_rel_error {
            max_rel_error = err;
            worst_coordinate = j;
        }
    }
    Ok(FiniteDiffReport {
        max_rel_error,
        worst_coordinate,
        passed: max_rel_error <= tol,
    })
}

/// Seeded points for gradient checks: `center + scale * N(0, I)`.
pub fn probe_points(center: &[f64], count: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xfd));
    (0..count)
        .map(|_| {
            center
                .iter()
                .map(|c| c + scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Empirical bound on per-sample gradient norms: the largest
/// `||grad f_e(w)||` over `count` seeded draws of a sample `e` and a point
/// `w` uniform in the ball of `radius` around `center`.
pub fn estimate_m(problem: &dyn Problem, center: &[f64], count: usize, radius: f64, seed: u64) -> f64 {
    let dim = problem.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x4d));
    let mut grad = vec![0.0; dim];
    let mut point = vec![0.0; dim];
    let mut best: f64 = 0.0;
    for _ in 0..count {
        let sample = rng.random_range(0..problem.num_samples());
        let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = squared_norm(&dir).sqrt();
        let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
        for j in 0..dim {
            let unit = if norm > 0.0 { dir[j] / norm } else { 0.0 };
            point[j] = center[j] + r * unit;
        }
        grad.fill(0.0);
        problem.add_sample_gradient(sample, &point, &mut grad);
        best = best.max(squared_norm(&grad).sqrt());
    }
    best
}
