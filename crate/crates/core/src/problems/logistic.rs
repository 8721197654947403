use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Problem, ProblemError};
use crate::util::squared_norm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticSpec {
    pub samples: usize,
    pub dim: usize,
    pub margin: f64,
    pub regularization: f64,
}

impl Default for LogisticSpec {
    fn default() -> Self {
        LogisticSpec {
            samples: 4096,
            dim: 20,
            margin: 1.0,
            regularization: 1e-4,
        }
    }
}

impl LogisticSpec {
    pub fn validate(&self) -> Result<(), ProblemError> {
        if self.samples == 0 || self.dim == 0 {
            return Err(ProblemError::InvalidShape(format!(
                "logistic problem needs samples and dimension >= 1, got {} x {}",
                self.samples, self.dim
            )));
        }
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(ProblemError::DegenerateMargin(self.margin));
        }
        if !(self.regularization >= 0.0) || !self.regularization.is_finite() {
            return Err(ProblemError::InvalidShape(format!(
                "regularization must be finite and >= 0, got {}",
                self.regularization
            )));
        }
        Ok(())
    }

    pub fn build(&self, seed: u64) -> Result<Logistic, ProblemError> {
        self.validate()?;
        let d = self.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut direction: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = squared_norm(&direction).sqrt();
        direction.iter_mut().for_each(|u| *u /= norm);

        let mut features = Vec::with_capacity(self.samples * d);
        let mut labels = Vec::with_capacity(self.samples);
        for _ in 0..self.samples {
            let mut x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let proj: f64 = x.iter().zip(&direction).map(|(a, b)| a * b).sum();
            let label = if proj < 0.0 { -1.0 } else { 1.0 };
            // Push the point away from the separating hyperplane by `margin`.
            for (xi, u) in x.iter_mut().zip(&direction) {
                *xi += label * self.margin * u;
            }
            features.extend_from_slice(&x);
            labels.push(label);
        }
        Ok(Logistic {
            dim: d,
            features,
            labels,
            regularization: self.regularization,
        })
    }
}

/// l2-regularized logistic regression on linearly separable data with
/// labels in `{-1, +1}`:
/// `f_e(w) = ln(1 + exp(-y_e <w, x_e>)) + (lambda/2) ||w||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logistic {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
    regularization: f64,
}

pub fn make_logistic(samples: usize, dim: usize, margin: f64, seed: u64) -> Result<Logistic, ProblemError> {
    LogisticSpec {
        samples,
        dim,
        margin,
        ..LogisticSpec::default()
    }
    .build(seed)
}

impl Logistic {
    pub fn features(&self, sample: usize) -> &[f64] {
        &self.features[sample * self.dim..(sample + 1) * self.dim]
    }

    pub fn label(&self, sample: usize) -> f64 {
        self.labels[sample]
    }

    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    pub fn max_feature_norm(&self) -> f64 {
        (0..self.labels.len())
            .map(|e| squared_norm(self.features(e)).sqrt())
            .fold(0.0, f64::max)
    }

    fn signed_margin(&self, sample: usize, w: &[f64]) -> f64 {
        let z: f64 = self.features(sample).iter().zip(w).map(|(x, w)| x * w).sum();
        self.labels[sample] * z
    }
}

/// `ln(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Problem for Logistic {
    fn name(&self) -> &'static str {
        "logistic"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn num_samples(&self) -> usize {
        self.labels.len()
    }

    fn initial_point(&self) -> Vec<f64> {
        vec![0.0; self.dim]
    }

    fn sample_loss(&self, sample: usize, w: &[f64]) -> f64 {
        softplus(-self.signed_margin(sample, w)) + 0.5 * self.regularization * squared_norm(w)
    }

    fn add_sample_gradient(&self, sample: usize, w: &[f64], out: &mut [f64]) {
        let coeff = -self.labels[sample] * sigmoid(-self.signed_margin(sample, w));
        for ((o, x), wj) in out.iter_mut().zip(self.features(sample)).zip(w) {
            *o += coeff * x + self.regularization * wj;
        }
    }

    /// Smoothness constant of `F`: `max ||x||^2 / 4 + lambda`.
    fn lipschitz(&self) -> Option<f64> {
        let r = self.max_feature_norm();
        Some(0.25 * r * r + self.regularization)
    }

    fn accuracy(&self, w: &[f64]) -> Option<f64> {
        let correct = (0..self.labels.len()).filter(|&e| self.signed_margin(e, w) > 0.0).count();
        Some(correct as f64 / self.labels.len() as f64)
    }
}
