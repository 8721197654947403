//! Shared fixtures for the benchmarks.

use wagma::collective::scenario::ScenarioConfig;
use wagma::netsim::{DelayModel, StragglerPolicy};
use wagma::optim::{Algorithm, OptimizerConfig};
use wagma::problems::{Problem, ProblemSpec, QuadraticSpec};

/// `processes` buffers of `words` distinct doubles.
pub fn buffers(processes: usize, words: usize) -> Vec<Vec<f64>> {
    (0..processes)
        .map(|r| (0..words).map(|i| (r * words + i) as f64 * 0.5).collect())
        .collect()
}

pub fn scenario(processes: usize, group_size: usize) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::new(processes, group_size, 20, 1);
    cfg.float_words = 64;
    cfg
}

pub fn quadratic(dim: usize) -> Box<dyn Problem> {
    ProblemSpec::Quadratic(QuadraticSpec {
        dim,
        samples: 1024,
        ..QuadraticSpec::default()
    })
    .build(1)
    .expect("quadratic builds")
}

pub fn training(algorithm: Algorithm, processes: usize, iterations: u64) -> OptimizerConfig {
    OptimizerConfig {
        algorithm,
        processes,
        group_size: 4.min(processes),
        tau: Some(10),
        iterations,
        ..OptimizerConfig::default()
    }
}

pub fn straggler_delay() -> DelayModel {
    DelayModel {
        straggler: StragglerPolicy {
            victims_per_iteration: 2,
            extra_delay_ms: 320.0,
            selection_seed: 1,
        },
        ..DelayModel::default()
    }
}
