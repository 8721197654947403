//! Self-checks behind `wagma verify`.

use std::fmt;

use crate::collective::scenario::{run_scenario, PayloadCorruption, ScenarioConfig};
use crate::netsim::{DelayModel, StragglerPolicy};
use crate::optim::{run_training, OptimizerConfig};
use crate::problems::{finite_diff_check, probe_points, LogisticSpec, MlpSpec, ProblemSpec, QuadraticSpec};
use crate::topology::{compute_groups_with, mixing_reachable_with, phase_masks_with, GroupingParams, MaskRule};

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub mask_rule: MaskRule,
    /// Flip a payload bit in the first randomized collective trial.
    pub inject_corruption: bool,
    pub trials: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            mask_rule: MaskRule::Rotating,
            inject_corruption: false,
            trials: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }

    pub fn passed(&self) -> bool {
        self.failures() == 0
    }
}

fn check(name: &str, result: Result<String, String>) -> CheckResult {
    let (passed, detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckResult {
        name: name.into(),
        passed,
        detail,
    }
}

pub fn verify(opts: &VerifyOptions) -> VerifyReport {
    let rule = opts.mask_rule;
    let checks = vec![
        check("worked-example", worked_example(rule)),
        check("partition", partitions(rule)),
        check("mixing", mixing(rule)),
        check("collective", collectives(opts)),
        check("gradients", gradients(opts.seed)),
        check("staleness", staleness(opts.seed)),
    ];
    VerifyReport { checks }
}

fn worked_example(rule: MaskRule) -> Result<String, String> {
    let expected = [
        vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]],
        vec![vec![0, 1, 4, 5], vec![2, 3, 6, 7]],
    ];
    for (t, want) in expected.iter().enumerate() {
        let params = GroupingParams::new(8, 4, t as u64).map_err(|e| e.to_string())?;
        let got = compute_groups_with(params, rule).groups;
        if &got != want {
            return Err(format!(
                "interpretation divergence under the {rule:?} mask rule: P=8, S=4, t={t} gives {got:?}, expected {want:?}"
            ));
        }
    }
    Ok("P=8, S=4 groups match at t=0 and t=1".into())
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut root = x;
    while parent[root] != root {
        root = parent[root];
    }
    let mut x = x;
    while parent[x] != root {
        let next = parent[x];
        parent[x] = root;
        x = next;
    }
    root
}

/// Groups as connected components of the exchange graph of one iteration.
fn union_find_groups(processes: usize, masks: &[usize]) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..processes).collect();
    for &mask in masks {
        for r in 0..processes {
            let peer = r ^ mask;
            if peer < processes {
                let (a, b) = (find(&mut parent, r), find(&mut parent, peer));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); processes];
    for r in 0..processes {
        let root = find(&mut parent, r);
        groups[root].push(r);
    }
    groups.retain(|g| !g.is_empty());
    groups
}

fn partitions(rule: MaskRule) -> Result<String, String> {
    let mut cases = 0;
    for log_p in 0..=8u32 {
        let p = 1usize << log_p;
        for log_s in 0..=log_p {
            let s = 1usize << log_s;
            for t in 0..(2 * log_p as u64 + 3) {
                let params = GroupingParams::new(p, s, t).map_err(|e| e.to_string())?;
                let partition = compute_groups_with(params, rule);
                partition
                    .check(p, s)
                    .map_err(|e| format!("P={p}, S={s}, t={t}: {e}"))?;
                let oracle = union_find_groups(p, &phase_masks_with(params, rule).masks);
                if oracle != partition.groups {
                    return Err(format!("P={p}, S={s}, t={t}: groups disagree with the exchange-graph components"));
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} (P, S, t) cases form valid partitions"))
}

fn mixing(rule: MaskRule) -> Result<String, String> {
    let mut cases = 0;
    for log_p in 1..=8u32 {
        let p = 1usize << log_p;
        for log_s in 1..=log_p {
            let s = 1usize << log_s;
            let window = (log_p as u64).div_ceil(log_s as u64);
            for start in 0..(log_p as u64) {
                let params = GroupingParams::new(p, s, start).map_err(|e| e.to_string())?;
                if !mixing_reachable_with(params, start, window, rule).map_err(|e| e.to_string())? {
                    return Err(format!(
                        "P={p}, S={s}: iterations {start}..{} do not mix every rank",
                        start + window
                    ));
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} windows of ceil(log P / log S) iterations mix all ranks"))
}

fn collectives(opts: &VerifyOptions) -> Result<String, String> {
    let mut words = 0;
    for trial in 0..opts.trials {
        let p = [4, 8, 16][trial % 3];
        let seed = crate::util::mix_seed(opts.seed, trial as u64);
        let mut cfg = ScenarioConfig::randomized(p, seed);
        if opts.inject_corruption && trial == 0 {
            cfg.group_size = cfg.group_size.max(2);
            cfg.corruption = Some(PayloadCorruption {
                version: 0,
                from: 0,
                bit: 62,
            });
        }
        let label = |e: String| format!("trial {trial} (P={p}, S={}, seed={seed}): {e}", cfg.group_size);
        let out = run_scenario(&cfg).map_err(|e| label(e.to_string()))?;
        out.check_exactly_once().map_err(label)?;
        out.check_activation_cost().map_err(label)?;
        words += out.check_sums(1e-9).map_err(label)?;
        out.check_group_agreement().map_err(label)?;
    }
    Ok(format!("{} randomized schedules, {words} accumulator words checked", opts.trials))
}

fn gradients(seed: u64) -> Result<String, String> {
    let specs = [
        ProblemSpec::Quadratic(QuadraticSpec {
            dim: 16,
            samples: 64,
            ..QuadraticSpec::default()
        }),
        ProblemSpec::Logistic(LogisticSpec {
            samples: 256,
            dim: 10,
            ..LogisticSpec::default()
        }),
        ProblemSpec::TinyMlp(MlpSpec {
            samples: 64,
            ..MlpSpec::default()
        }),
    ];
    let mut worst: f64 = 0.0;
    for spec in &specs {
        let problem = spec.build(seed).map_err(|e| e.to_string())?;
        let center = problem.optimum().map(<[f64]>::to_vec).unwrap_or_else(|| problem.initial_point());
        for point in probe_points(&center, 5, 0.5, seed) {
            let report = finite_diff_check(problem.as_ref(), &point, 1e-5, 1e-5).map_err(|e| e.to_string())?;
            worst = worst.max(report.max_rel_error);
            if !report.passed {
                return Err(format!(
                    "{}: relative error {:.3e} at coordinate {}",
                    problem.name(),
                    report.max_rel_error,
                    report.worst_coordinate
                ));
            }
        }
    }
    Ok(format!("analytic gradients match central differences, worst relative error {worst:.2e}"))
}

fn staleness(seed: u64) -> Result<String, String> {
    let tau = 6;
    let cfg = OptimizerConfig {
        processes: 16,
        group_size: 4,
        tau: Some(tau),
        iterations: 60,
        ..OptimizerConfig::default()
    };
    let delay = DelayModel {
        base_compute_ms: 10.0,
        jitter_max_ms: 5.0,
        straggler: StragglerPolicy {
            victims_per_iteration: 2,
            extra_delay_ms: 200.0,
            selection_seed: seed,
        },
        ..DelayModel::default()
    };
    let problem = ProblemSpec::Quadratic(QuadraticSpec {
        dim: 16,
        samples: 256,
        ..QuadraticSpec::default()
    })
    .build(seed)
    .map_err(|e| e.to_string())?;
    let run = run_training(&cfg, problem.as_ref(), &delay, seed).map_err(|e| e.to_string())?;
    let max = run.summary.max_staleness;
    if max >= tau {
        return Err(format!("staleness {max} reached tau = {tau}"));
    }
    Ok(format!("max staleness {max} < tau = {tau} under stragglers"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(rule: MaskRule, corrupt: bool) -> VerifyReport {
        verify(&VerifyOptions {
            mask_rule: rule,
            inject_corruption: corrupt,
            trials: 12,
            seed: 1,
        })
    }

    #[test]
    fn default_rule_passes() {
        let report = quick(MaskRule::Rotating, false);
        for c in &report.checks {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn literal_rule_reports_divergence() {
        let report = quick(MaskRule::Literal, false);
        let example = &report.checks[0];
        assert!(!example.passed);
        assert!(example.detail.contains("interpretation divergence"));
        assert!(!report.checks[1].passed);
    }

    #[test]
    fn corruption_is_caught() {
        let report = quick(MaskRule::Rotating, true);
        let c = report.checks.iter().find(|c| c.name == "collective").unwrap();
        assert!(!c.passed, "{c}");
    }

    #[test]
    fn union_find_oracle_on_example() {
        assert_eq!(union_find_groups(8, &[1, 4]), vec![vec![0, 1, 4, 5], vec![2, 3, 6, 7]]);
        assert_eq!(union_find_groups(4, &[]), vec![vec![0], vec![1], vec![2], vec![3]]);
    }
}
