//! WAGMA-SGD and the baseline optimizers.
//!
//! Every algorithm runs over the discrete-event simulator: each worker
//! computes a minibatch update (taking a simulated compute delay), then
//! averages with peers according to its algorithm. [`run_training`] drives
//! all workers and emits one [`MetricsRecord`] per iteration.

mod diagnostics;
mod driver;

pub use diagnostics::{compute_diagnostics, read_metrics_csv, write_metrics_csv, Diagnostics, MetricsRecord, METRICS_COLUMNS};
pub use driver::{run_training, run_training_observed, worker_rng, RunSummary, TrainingRun};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collective::{CollectiveError, EndpointConfig, GroupSelection};
use crate::netsim::SimError;
use crate::problems::{Batch, Problem, ProblemError};
use crate::topology::{MaskRule, Rank};
use crate::util::squared_norm;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("rank {rank}: non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { rank: Rank, iteration: u64 },
    #[error("non-finite loss at iteration {iteration}")]
    Divergence { iteration: u64 },
    #[error("rank {rank}: version {version} averaged a buffer stamped {stamp}, older than tau = {tau} allows")]
    StalenessViolation { rank: Rank, version: u64, stamp: i64, tau: u64 },
    #[error("replicas differ after global synchronization at iteration {iteration}")]
    SyncMismatch { iteration: u64 },
    #[error("protocol fault: {0}")]
    Protocol(String),
    #[error("simulation went idle with workers still running: {0}")]
    Stalled(String),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Group model averaging; the `alpha`/`beta` flags pick the collective.
    Wagma,
    /// Global gradient averaging every iteration.
    Allreduce,
    /// Local steps with a global model average every `tau` iterations.
    LocalSgd,
    /// Synchronous average with the two ring neighbours.
    Dpsgd,
    /// Asynchronous pairwise averaging with a random partner.
    Adpsgd,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Wagma,
        Algorithm::Allreduce,
        Algorithm::LocalSgd,
        Algorithm::Dpsgd,
        Algorithm::Adpsgd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Wagma => "wagma",
            Algorithm::Allreduce => "allreduce",
            Algorithm::LocalSgd => "local_sgd",
            Algorithm::Dpsgd => "dpsgd",
            Algorithm::Adpsgd => "adpsgd",
        }
    }

    pub fn parse(name: &str) -> Option<Algorithm> {
        Algorithm::ALL.into_iter().find(|a| a.name() == name)
    }

    fn uses_butterfly(self) -> bool {
        matches!(self, Algorithm::Wagma | Algorithm::Allreduce | Algorithm::LocalSgd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearningRate {
    Constant { eta: f64 },
    /// `eta * factor^(t / every)`.
    StepDecay { eta: f64, factor: f64, every: u64 },
    /// `P / sqrt(T)`.
    Theorem,
}

impl LearningRate {
    pub fn at(&self, iteration: u64, processes: usize, iterations: u64) -> f64 {
        match *self {
            LearningRate::Constant { eta } => eta,
            LearningRate::StepDecay { eta, factor, every } => eta * factor.powi((iteration / every) as i32),
            LearningRate::Theorem => processes as f64 / (iterations as f64).sqrt(),
        }
    }

    fn validate(&self) -> Result<(), String> {
        match *self {
            LearningRate::Constant { eta } if !(eta > 0.0 && eta.is_finite()) => {
                Err(format!("learning rate must be positive, got {eta}"))
            }
            LearningRate::StepDecay { eta, factor, every } => {
                if !(eta > 0.0 && eta.is_finite()) {
                    Err(format!("learning rate must be positive, got {eta}"))
                } else if !(factor > 0.0 && factor.is_finite()) || every == 0 {
                    Err(format!("step decay needs factor > 0 and every >= 1, got {factor} and {every}"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// The update rule `U`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateRule {
    #[default]
    Sgd,
    /// Heavy ball: `m <- beta * m + g`, step `-eta * m`.
    Momentum { beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub processes: usize,
    pub group_size: usize,
    /// Global synchronization period; `None` never synchronizes.
    pub tau: Option<u64>,
    /// Wait-avoiding group allreduce.
    pub alpha: bool,
    /// Blocking group allreduce.
    pub beta: bool,
    pub learning_rate: LearningRate,
    pub batch_size: usize,
    pub update_rule: UpdateRule,
    pub iterations: u64,
    pub mask_rule: MaskRule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            algorithm: Algorithm::Wagma,
            processes: 16,
            group_size: 4,
            tau: Some(10),
            alpha: true,
            beta: false,
            learning_rate: LearningRate::Constant { eta: 0.05 },
            batch_size: 8,
            update_rule: UpdateRule::Sgd,
            iterations: 2000,
            mask_rule: MaskRule::Rotating,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |msg: String| Err(OptimError::InvalidConfig(msg));
        let p = self.processes;
        if p == 0 {
            return bad("at least one process is required".into());
        }
        if self.algorithm.uses_butterfly() && !p.is_power_of_two() {
            return bad(format!("{} needs a power-of-two process count, got {p}", self.algorithm.name()));
        }
        if self.algorithm == Algorithm::Wagma {
            if self.alpha && self.beta {
                return bad("alpha and beta cannot both be set".into());
            }
            let s = self.group_size;
            if s == 0 || !s.is_power_of_two() || s > p {
                return bad(format!("group size must be a power of two in 1..={p}, got {s}"));
            }
        }
        if self.tau == Some(0) {
            return bad("tau must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.iterations == 0 {
            return bad("at least one iteration is required".into());
        }
        self.learning_rate.validate().map_err(OptimError::InvalidConfig)?;
        if let UpdateRule::Momentum { beta } = self.update_rule {
            if !(0.0..1.0).contains(&beta) {
                return bad(format!("momentum must lie in [0, 1), got {beta}"));
            }
        }
        if self.learning_rate == LearningRate::Theorem {
            let tau = self.tau.unwrap_or(1) as f64;
            let needed = (p as f64).powi(4) * tau.powi(4);
            if (self.iterations as f64) < needed {
                log::warn!(
                    "theorem learning rate assumes T >= P^4 tau^4 = {needed}, but T = {}",
                    self.iterations
                );
            }
        }
        Ok(())
    }

    pub fn is_sync(&self, iteration: u64) -> bool {
        matches!(self.tau, Some(tau) if (iteration + 1) % tau == 0)
    }

    /// Group averaging runs through a collective (either flavour).
    pub fn group_collective(&self) -> bool {
        self.algorithm == Algorithm::Wagma && (self.alpha || self.beta)
    }

    pub(crate) fn endpoint_config(&self) -> EndpointConfig {
        match self.algorithm {
            Algorithm::Allreduce => EndpointConfig {
                processes: self.processes,
                group_size: 1,
                wait_avoiding: false,
                selection: GroupSelection::Butterfly(self.mask_rule),
                sync_period: Some(1),
            },
            _ => EndpointConfig {
                processes: self.processes,
                group_size: if self.algorithm == Algorithm::Wagma { self.group_size } else { 1 },
                wait_avoiding: self.algorithm == Algorithm::Wagma && self.alpha,
                selection: GroupSelection::Butterfly(self.mask_rule),
                sync_period: self.tau,
            },
        }
    }
}

/// Replica and bookkeeping of one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerState {
    pub rank: Rank,
    /// Model at the start of the current iteration.
    pub w: Vec<f64>,
    /// Locally updated model of the current iteration.
    pub w_prime: Vec<f64>,
    /// Iteration at which the replica last interacted with a group.
    pub q: u64,
    /// Iteration after the last global synchronization.
    pub r: u64,
    pub iter: u64,
    pub momentum: Vec<f64>,
}

impl WorkerState {
    pub fn new(rank: Rank, initial: Vec<f64>) -> Self {
        let d = initial.len();
        WorkerState {
            rank,
            w_prime: initial.clone(),
            w: initial,
            q: 0,
            r: 0,
            iter: 0,
            momentum: vec![0.0; d],
        }
    }

    /// Mean minibatch gradient at `w`; returns its norm.
    pub fn batch_gradient(&self, problem: &dyn Problem, batch: &Batch, out: &mut [f64]) -> Result<f64, OptimError> {
        batch.gradient(problem, &self.w, out);
        let norm_sq = squared_norm(out);
        if !norm_sq.is_finite() {
            return Err(OptimError::NonFiniteGradient {
                rank: self.rank,
                iteration: self.iter,
            });
        }
        Ok(norm_sq.sqrt())
    }

    /// The model change `U(g)`, advancing the momentum buffer.
    pub fn update(&mut self, gradient: &[f64], eta: f64, rule: UpdateRule) -> Vec<f64> {
        match rule {
            UpdateRule::Sgd => gradient.iter().map(|g| -eta * g).collect(),
            UpdateRule::Momentum { beta } => {
                for (m, g) in self.momentum.iter_mut().zip(gradient) {
                    *m = beta * *m + g;
                }
                self.momentum.iter().map(|m| -eta * m).collect()
            }
        }
    }

    /// `W' = W + delta`.
    pub fn apply(&mut self, delta: &[f64]) {
        self.w_prime = self.w.iter().zip(delta).map(|(w, d)| w + d).collect();
    }

    /// One local step on `batch`: sets `w_prime`. Returns the gradient norm.
    pub fn local_step(&mut self, problem: &dyn Problem, batch: &Batch, eta: f64, rule: UpdateRule) -> Result<f64, OptimError> {
        let mut g = vec![0.0; self.w.len()];
        let norm = self.batch_gradient(problem, batch, &mut g)?;
        let delta = self.update(&g, eta, rule);
        self.apply(&delta);
        Ok(norm)
    }

    /// Checks `t >= q > t - tau` and `t >= r > t - tau`.
    pub fn check_interaction_window(&self, tau: Option<u64>) -> Result<(), OptimError> {
        let Some(tau) = tau else {
            return Ok(());
        };
        let t = self.iter;
        for (name, v) in [("q", self.q), ("r", self.r)] {
            if v > t || v + tau <= t {
                return Err(OptimError::Protocol(format!(
                    "rank {}: {name} = {v} outside the window ({}, {t}] at iteration {t}",
                    self.rank,
                    t.saturating_sub(tau)
                )));
            }
        }
        Ok(())
    }
}

/// Group average after a completed group allreduce: `sum / S` when the
/// worker's fresh model was part of the sum, otherwise the fresh model is
/// added as an extra member, `(sum + w') / (S + 1)`.
pub fn group_average(sum: &[f64], w_prime: &[f64], group_size: usize, timely: bool) -> Vec<f64> {
    if timely {
        let s = group_size as f64;
        sum.iter().map(|x| x / s).collect()
    } else {
        let s = (group_size + 1) as f64;
        sum.iter().zip(w_prime).map(|(x, w)| (x + w) / s).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::Quadratic;

    fn half_norm_sq() -> Quadratic {
        Quadratic::from_parts(vec![1.0], vec![0.0], vec![2.0]).unwrap()
    }

    #[test]
    fn sgd_step_closed_form() {
        let q = half_norm_sq();
        let mut w = WorkerState::new(0, vec![2.0]);
        let batch = Batch { indices: vec![0] };
        w.local_step(&q, &batch, 0.1, UpdateRule::Sgd).unwrap();
        assert!((w.w_prime[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_keeps_model() {
        let q = crate::problems::make_quadratic(8, 4.0, 1).unwrap();
        let mut w = WorkerState::new(0, vec![0.5; 8]);
        let batch = Batch { indices: vec![3, 9, 100] };
        w.local_step(&q, &batch, 0.0, UpdateRule::Sgd).unwrap();
        assert_eq!(w.w_prime, w.w);
    }

    #[test]
    fn zero_momentum_is_sgd() {
        let q = crate::problems::make_quadratic(8, 4.0, 1).unwrap();
        let mut a = WorkerState::new(0, vec![0.5; 8]);
        let mut b = a.clone();
        for k in 0..20 {
            let batch = Batch { indices: vec![k, k + 7] };
            a.local_step(&q, &batch, 0.1, UpdateRule::Sgd).unwrap();
            b.local_step(&q, &batch, 0.1, UpdateRule::Momentum { beta: 0.0 }).unwrap();
            assert_eq!(a.w_prime, b.w_prime);
            a.w = a.w_prime.clone();
            b.w = b.w_prime.clone();
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let q = half_norm_sq();
        let mut w = WorkerState::new(3, vec![f64::NAN]);
        let err = w.local_step(&q, &Batch { indices: vec![0] }, 0.1, UpdateRule::Sgd);
        assert_eq!(err, Err(OptimError::NonFiniteGradient { rank: 3, iteration: 0 }));
    }

    #[test]
    fn group_average_rules() {
        // P=4, S=2, group {0,1}: all timely.
        let w0 = [1.0, 4.0];
        let w1 = [3.0, 8.0];
        let sum: Vec<f64> = w0.iter().zip(&w1).map(|(a, b)| b + a).collect();
        assert_eq!(group_average(&sum, &w0, 2, true), vec![2.0, 6.0]);
        // p1 stale: the sum holds p0's fresh model and p1's previous one,
        // p1 adds its fresh model on top.
        let w1_old = [0.0, 2.0];
        let sum: Vec<f64> = w0.iter().zip(&w1_old).map(|(a, b)| b + a).collect();
        assert_eq!(group_average(&sum, &w1, 2, false), vec![4.0 / 3.0, 14.0 / 3.0]);
    }

    #[test]
    fn alpha_and_beta_are_exclusive() {
        let cfg = OptimizerConfig {
            alpha: true,
            beta: true,
            ..OptimizerConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(OptimError::InvalidConfig(_))));
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        let bad = [
            OptimizerConfig {
                processes: 12,
                ..OptimizerConfig::default()
            },
            OptimizerConfig {
                group_size: 32,
                ..OptimizerConfig::default()
            },
            OptimizerConfig {
                tau: Some(0),
                ..OptimizerConfig::default()
            },
            OptimizerConfig {
                learning_rate: LearningRate::Constant { eta: 0.0 },
                ..OptimizerConfig::default()
            },
            OptimizerConfig {
                update_rule: UpdateRule::Momentum { beta: 1.0 },
                ..OptimizerConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        let ring = OptimizerConfig {
            algorithm: Algorithm::Dpsgd,
            processes: 6,
            ..OptimizerConfig::default()
        };
        assert!(ring.validate().is_ok());
    }

    #[test]
    fn learning_rate_schedules() {
        assert_eq!(LearningRate::Constant { eta: 0.3 }.at(99, 4, 100), 0.3);
        let step = LearningRate::StepDecay {
            eta: 1.0,
            factor: 0.5,
            every: 10,
        };
        assert_eq!(step.at(9, 1, 100), 1.0);
        assert_eq!(step.at(25, 1, 100), 0.25);
        assert_eq!(LearningRate::Theorem.at(0, 4, 1600), 0.1);
    }

    #[test]
    fn interaction_window() {
        let mut w = WorkerState::new(0, vec![0.0]);
        w.iter = 12;
        w.q = 12;
        w.r = 10;
        assert!(w.check_interaction_window(Some(10)).is_ok());
        w.r = 2;
        assert!(w.check_interaction_window(Some(10)).is_err());
        assert!(w.check_interaction_window(None).is_ok());
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(Algorithm::parse(a.name()), Some(a));
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.name()));
        }
    }
}
