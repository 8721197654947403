use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Problem, ProblemError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadraticSpec {
    pub dim: usize,
    pub condition_number: f64,
    pub samples: usize,
    /// Standard deviation of the per-coordinate gradient noise.
    pub noise: f64,
}

impl Default for QuadraticSpec {
    fn default() -> Self {
        QuadraticSpec {
            dim: 64,
            condition_number: 10.0,
            samples: 1024,
            noise: 1.0,
        }
    }
}

impl QuadraticSpec {
    pub fn validate(&self) -> Result<(), ProblemError> {
        if self.dim == 0 {
            return Err(ProblemError::InvalidShape("quadratic dimension must be at least 1".into()));
        }
        if !(self.condition_number >= 1.0) || !self.condition_number.is_finite() {
            return Err(ProblemError::InvalidShape(format!(
                "condition number must be a finite value >= 1, got {}",
                self.condition_number
            )));
        }
        if self.samples == 0 {
            return Err(ProblemError::InvalidShape("quadratic needs at least one sample".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(ProblemError::InvalidShape(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn build(&self, seed: u64) -> Result<Quadratic, ProblemError> {
        self.validate()?;
        let d = self.dim;
        let kappa = self.condition_number;
        let diag: Vec<f64> = (0..d)
            .map(|j| {
                if d == 1 {
                    1.0
                } else {
                    kappa.powf(j as f64 / (d - 1) as f64)
                }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let optimum: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();

        // Sample e perturbs only coordinate block e mod blocks. Within a block
        // the perturbations are centered so that they cancel in the full sum.
        let blocks = d.min(8).min(self.samples);
        let scale = self.noise * (blocks as f64).sqrt();
        let mut noise = vec![vec![0.0; d]; self.samples];
        for (e, xi) in noise.iter_mut().enumerate() {
            for j in block_range(e % blocks, blocks, d) {
                xi[j] = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for b in 0..blocks {
            let members: Vec<usize> = (b..self.samples).step_by(blocks).collect();
            for j in block_range(b, blocks, d) {
                let mean = members.iter().map(|&e| noise[e][j]).sum::<f64>() / members.len() as f64;
                for &e in &members {
                    noise[e][j] -= mean;
                }
            }
        }
        Ok(Quadratic {
            diag,
            optimum,
            initial: vec![0.0; d],
            noise,
        })
    }
}

fn block_range(block: usize, blocks: usize, d: usize) -> std::ops::Range<usize> {
    (block * d / blocks)..((block + 1) * d / blocks)
}

/// `F(x) = 1/2 (x - x*)^T A (x - x*)` with diagonal `A`. Sample `e` adds a
/// linear term `<xi_e, x - x*>`; the `xi_e` sum to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    diag: Vec<f64>,
    optimum: Vec<f64>,
    initial: Vec<f64>,
    noise: Vec<Vec<f64>>,
}

/// Log-spaced spectrum in `[1, condition_number]`, noise level 1, 1024
/// samples.
pub fn make_quadratic(dim: usize, condition_number: f64, seed: u64) -> Result<Quadratic, ProblemError> {
    QuadraticSpec {
        dim,
        condition_number,
        ..QuadraticSpec::default()
    }
    .build(seed)
}

impl Quadratic {
    /// Deterministic quadratic with a single noise-free sample.
    pub fn from_parts(diag: Vec<f64>, optimum: Vec<f64>, initial: Vec<f64>) -> Result<Quadratic, ProblemError> {
        let d = diag.len();
        if d == 0 || optimum.len() != d || initial.len() != d {
            return Err(ProblemError::InvalidShape(format!(
                "diagonal, optimum and initial point must share a nonzero length ({}, {}, {})",
                d,
                optimum.len(),
                initial.len()
            )));
        }
        if diag.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(ProblemError::InvalidShape("diagonal entries must be positive".into()));
        }
        Ok(Quadratic {
            diag,
            optimum,
            initial,
            noise: vec![vec![0.0; d]],
        })
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    pub fn sample_noise(&self, sample: usize) -> &[f64] {
        &self.noise[sample]
    }
}

impl Problem for Quadratic {
    fn name(&self) -> &'static str {
        "quadratic"
    }

    fn dim(&self) -> usize {
        self.diag.len()
    }

    fn num_samples(&self) -> usize {
        self.noise.len()
    }

    fn initial_point(&self) -> Vec<f64> {
        self.initial.clone()
    }

    fn sample_loss(&self, sample: usize, w: &[f64]) -> f64 {
        let xi = &self.noise[sample];
        let mut total = 0.0;
        for j in 0..w.len() {
            let diff = w[j] - self.optimum[j];
            total += 0.5 * self.diag[j] * diff * diff + xi[j] * diff;
        }
        total
    }

    fn add_sample_gradient(&self, sample: usize, w: &[f64], out: &mut [f64]) {
        let xi = &self.noise[sample];
        for j in 0..w.len() {
            out[j] += self.diag[j] * (w[j] - self.optimum[j]) + xi[j];
        }
    }

    fn loss(&self, w: &[f64]) -> f64 {
        w.iter()
            .zip(&self.optimum)
            .zip(&self.diag)
            .map(|((x, o), a)| 0.5 * a * (x - o) * (x - o))
            .sum()
    }

    fn gradient(&self, w: &[f64], out: &mut [f64]) {
        for j in 0..w.len() {
            out[j] = self.diag[j] * (w[j] - self.optimum[j]);
        }
    }

    fn optimum(&self) -> Option<&[f64]> {
        Some(&self.optimum)
    }

    fn optimal_loss(&self) -> Option<f64> {
        Some(0.0)
    }

    fn lipschitz(&self) -> Option<f64> {
        self.diag.iter().copied().reduce(f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{estimate_m, finite_diff_check, probe_points};

    fn unit() -> Quadratic {
        Quadratic::from_parts(vec![1.0], vec![0.0], vec![0.0]).unwrap()
    }

    #[test]
    fn one_dimensional_values() {
        let q = unit();
        assert_eq!(q.loss(&[3.0]), 4.5);
        let mut g = [0.0];
        q.gradient(&[3.0], &mut g);
        assert_eq!(g, [3.0]);
    }

    #[test]
    fn gradient_vanishes_at_optimum() {
        let q = make_quadratic(16, 10.0, 4).unwrap();
        let mut g = vec![1.0; 16];
        q.gradient(q.optimum().unwrap(), &mut g);
        assert!(g.iter().all(|x| *x == 0.0));
        assert_eq!(q.loss(q.optimum().unwrap()), 0.0);
    }

    #[test]
    fn lipschitz_matches_power_iteration() {
        let q = make_quadratic(64, 10.0, 1).unwrap();
        // Power iteration on A through gradient differences only.
        let origin = q.optimum().unwrap().to_vec();
        let mut v: Vec<f64> = (0..64).map(|j| 1.0 + (j as f64) * 1e-3).collect();
        let mut lambda = 0.0;
        let mut g = vec![0.0; 64];
        for _ in 0..5000 {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let point: Vec<f64> = origin.iter().zip(&v).map(|(o, x)| o + x / norm).collect();
            q.gradient(&point, &mut g);
            lambda = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.clone_from(&g);
        }
        let l = q.lipschitz().unwrap();
        assert_eq!(l, 10.0);
        assert!((lambda - l).abs() / l < 1e-6, "power iteration {lambda}");
    }

    #[test]
    fn sample_gradients_average_to_full_gradient() {
        let q = make_quadratic(12, 5.0, 2).unwrap();
        let w: Vec<f64> = (0..12).map(|j| j as f64 * 0.1).collect();
        let mut sum = vec![0.0; 12];
        for e in 0..q.num_samples() {
            q.add_sample_gradient(e, &w, &mut sum);
        }
        let mut full = vec![0.0; 12];
        q.gradient(&w, &mut full);
        for (s, f) in sum.iter().zip(&full) {
            assert!((s / q.num_samples() as f64 - f).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_is_block_supported() {
        let q = make_quadratic(16, 2.0, 3).unwrap();
        let xi = q.sample_noise(1);
        assert!(xi[..2].iter().all(|x| *x == 0.0));
        assert!(xi[2..4].iter().all(|x| *x != 0.0));
        assert!(xi[4..].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn finite_differences_are_tight() {
        // Rounding of F itself limits the quotient to about eps * F / step,
        // so probe where F is moderate.
        let q = make_quadratic(64, 10.0, 9).unwrap();
        for point in probe_points(q.optimum().unwrap(), 10, 0.5, 5) {
            let report = finite_diff_check(&q, &point, 1e-5, 1e-9).unwrap();
            assert!(report.passed, "{report:?}");
        }
    }

    #[test]
    fn m_estimates() {
        let q = unit();
        let m = estimate_m(&q, &[0.0], 4000, 2.0, 1);
        assert!(m <= 2.0 && m > 1.99, "{m}");
        assert_eq!(estimate_m(&q, &[0.0], 100, 0.0, 1), 0.0);
    }

    #[test]
    fn invalid_shapes() {
        assert!(make_quadratic(0, 10.0, 0).is_err());
        assert!(make_quadratic(4, 0.5, 0).is_err());
        assert!(make_quadratic(4, f64::NAN, 0).is_err());
        assert!(Quadratic::from_parts(vec![1.0, -1.0], vec![0.0; 2], vec![0.0; 2]).is_err());
    }

    #[test]
    fn same_seed_same_problem() {
        assert_eq!(make_quadratic(8, 3.0, 7).unwrap(), make_quadratic(8, 3.0, 7).unwrap());
        assert_ne!(make_quadratic(8, 3.0, 7).unwrap(), make_quadratic(8, 3.0, 8).unwrap());
    }
}
