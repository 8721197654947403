//! Butterfly phase schedule and dynamic group partitioning.
//!
//! Ranks live on a hypercube of `P = 2^g` vertices. A butterfly phase pairs
//! every rank with the rank that differs in exactly one bit (the phase mask).
//! Iteration `t` executes `log2 S` consecutive phases, so the `P` ranks fall
//! into `P / S` disjoint groups of size `S`. The starting phase rotates with
//! `t`, which changes the group composition every iteration and spreads a
//! local update to every rank within `ceil(log2 P / log2 S)` iterations.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Process identifier, `0..P`.
pub type Rank = usize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("process count {0} is not a power of two")]
    ProcessCountNotPowerOfTwo(usize),
    #[error("group size {0} is not a power of two")]
    GroupSizeNotPowerOfTwo(usize),
    #[error("group size {group_size} exceeds process count {processes}")]
    GroupLargerThanWorld { group_size: usize, processes: usize },
    #[error("rank {rank} out of range for {processes} processes")]
    RankOutOfRange { rank: Rank, processes: usize },
    #[error("mask {mask:#x} is not a single bit below {processes}")]
    InvalidMask { mask: usize, processes: usize },
    #[error("iteration count must be at least 1")]
    EmptyWindow,
}

/// How the per-iteration masks are derived from the iteration index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRule {
    /// Phase `r` of iteration `t` uses bit `(t * log2 S + r) mod log2 P`.
    #[default]
    Rotating,
    /// The grouping pseudocode read literally: a single mask that is shifted
    /// left by the running `shift` before every phase. Kept for comparison;
    /// it diverges from the rotating rule from `t = 1` onwards.
    Literal,
}

/// Validated `(P, S, t)` triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupingParams {
    processes: usize,
    group_size: usize,
    iteration: u64,
}

impl GroupingParams {
    pub fn new(processes: usize, group_size: usize, iteration: u64) -> Result<Self, TopologyError> {
        if !processes.is_power_of_two() {
            return Err(TopologyError::ProcessCountNotPowerOfTwo(processes));
        }
        if !group_size.is_power_of_two() {
            return Err(TopologyError::GroupSizeNotPowerOfTwo(group_size));
        }
        if group_size > processes {
            return Err(TopologyError::GroupLargerThanWorld {
                group_size,
                processes,
            });
        }
        Ok(Self {
            processes,
            group_size,
            iteration,
        })
    }

    pub fn processes(&self) -> usize {
        self.processes
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Same `P` and `S`, different iteration.
    pub fn at(&self, iteration: u64) -> Self {
        Self { iteration, ..*self }
    }

    /// `log2 P`.
    pub fn global_phases(&self) -> u32 {
        self.processes.trailing_zeros()
    }

    /// `log2 S`.
    pub fn group_phases(&self) -> u32 {
        self.group_size.trailing_zeros()
    }

    /// First butterfly phase executed in this iteration.
    pub fn initial_shift(&self) -> u32 {
        let global = self.global_phases() as u64;
        if global == 0 {
            return 0;
        }
        ((self.iteration % global) * self.group_phases() as u64 % global) as u32
    }
}

/// Ordered bitmasks of the phases one iteration executes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhasePlan {
    pub masks: Vec<usize>,
}

impl PhasePlan {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Disjoint groups for one iteration. Each group is sorted ascending and the
/// groups are ordered by their smallest member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    pub iteration: u64,
    pub groups: Vec<Vec<Rank>>,
}

impl GroupPartition {
    /// Index of the group holding `rank`.
    pub fn group_of(&self, rank: Rank) -> Option<usize> {
        self.groups.iter().position(|g| g.binary_search(&rank).is_ok())
    }

    /// Checks the partition invariants: `P / S` disjoint groups of size `S`
    /// covering `0..P`. Returns a description of the first violation.
    pub fn check(&self, processes: usize, group_size: usize) -> Result<(), String> {
        if self.groups.len() * group_size != processes {
            return Err(format!(
                "expected {} groups, found {}",
                processes / group_size.max(1),
                self.groups.len()
            ));
        }
        let mut seen = vec![false; processes];
        for group in &self.groups {
            if group.len() != group_size {
                return Err(format!("group {group:?} has size {}, expected {group_size}", group.len()));
            }
            for &rank in group {
                if rank >= processes {
                    return Err(format!("rank {rank} out of range"));
                }
                if std::mem::replace(&mut seen[rank], true) {
                    return Err(format!("rank {rank} appears twice"));
                }
            }
        }
        Ok(())
    }
}

/// Masks for iteration `params.iteration()` under the default rotating rule.
pub fn phase_masks(params: GroupingParams) -> PhasePlan {
    phase_masks_with(params, MaskRule::Rotating)
}

pub fn phase_masks_with(params: GroupingParams, rule: MaskRule) -> PhasePlan {
    let global = params.global_phases();
    let phases = params.group_phases();
    if phases == 0 {
        return PhasePlan { masks: Vec::new() };
    }
    let mut shift = params.initial_shift();
    let mut masks = Vec::with_capacity(phases as usize);
    match rule {
        MaskRule::Rotating => {
            for _ in 0..phases {
                masks.push(1usize << shift);
                shift = (shift + 1) % global;
            }
        }
        MaskRule::Literal => {
            let mut mask: u128 = 1;
            for _ in 0..phases {
                mask = mask.checked_shl(shift).unwrap_or(0);
                // Bits shifted beyond the word are gone; a zero mask pairs nobody.
                masks.push(usize::try_from(mask).unwrap_or(0));
                shift = (shift + 1) % global;
            }
        }
    }
    PhasePlan { masks }
}

/// Groups for one iteration under the rotating rule.
pub fn compute_groups(params: GroupingParams) -> GroupPartition {
    compute_groups_with(params, MaskRule::Rotating)
}

/// Groups for one iteration: the closure of `p ~ p XOR m` over the
/// iteration's masks. Masks that do not name a rank pair (zero or `>= P`)
/// relate nothing.
pub fn compute_groups_with(params: GroupingParams, rule: MaskRule) -> GroupPartition {
    let processes = params.processes();
    let masks: Vec<usize> = phase_masks_with(params, rule)
        .masks
        .into_iter()
        .filter(|&m| m != 0 && m < processes)
        .collect();
    let mut label = vec![usize::MAX; processes];
    let mut groups = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..processes {
        if label[start] != usize::MAX {
            continue;
        }
        let id = groups.len();
        let mut members = Vec::new();
        label[start] = id;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            members.push(p);
            for &m in &masks {
                let q = p ^ m;
                if label[q] == usize::MAX {
                    label[q] = id;
                    queue.push_back(q);
                }
            }
        }
        members.sort_unstable();
        groups.push(members);
    }
    GroupPartition {
        iteration: params.iteration(),
        groups,
    }
}

/// Butterfly partner of `rank` across `mask`.
pub fn peer(rank: Rank, mask: usize, processes: usize) -> Result<Rank, TopologyError> {
    if rank >= processes {
        return Err(TopologyError::RankOutOfRange { rank, processes });
    }
    if !mask.is_power_of_two() || mask >= processes {
        return Err(TopologyError::InvalidMask { mask, processes });
    }
    Ok(rank ^ mask)
}

/// Children of `rank` in the binomial broadcast tree rooted at `root`, in
/// send order (lowest bit first).
pub fn binomial_children(root: Rank, rank: Rank, processes: usize) -> Vec<Rank> {
    let relative = rank ^ root;
    let first_bit = if relative == 0 {
        0
    } else {
        usize::BITS - relative.leading_zeros()
    };
    let global = processes.trailing_zeros();
    (first_bit..global).map(|bit| rank ^ (1usize << bit)).collect()
}

/// Whether information can flow from every rank to every rank when the
/// group-averaging graphs of iterations `start..start + window` are composed.
pub fn mixing_reachable(params: GroupingParams, start: u64, window: u64) -> Result<bool, TopologyError> {
    mixing_reachable_with(params, start, window, MaskRule::Rotating)
}

pub fn mixing_reachable_with(
    params: GroupingParams,
    start: u64,
    window: u64,
    rule: MaskRule,
) -> Result<bool, TopologyError> {
    if window == 0 {
        return Err(TopologyError::EmptyWindow);
    }
    let processes = params.processes();
    let words = processes.div_ceil(64);
    // reach[p] = set of ranks whose initial state has influenced p.
    let mut reach: Vec<Vec<u64>> = (0..processes)
        .map(|p| {
            let mut bits = vec![0u64; words];
            bits[p / 64] |= 1 << (p % 64);
            bits
        })
        .collect();
    for t in start..start + window {
        let partition = compute_groups_with(params.at(t), rule);
        for group in &partition.groups {
            let mut merged = vec![0u64; words];
            for &p in group {
                for (acc, w) in merged.iter_mut().zip(&reach[p]) {
                    *acc |= w;
                }
            }
            for &p in group {
                reach[p].clone_from(&merged);
            }
        }
    }
    let full = |bits: &[u64]| bits.iter().map(|w| w.count_ones() as usize).sum::<usize>() == processes;
    Ok(reach.iter().all(|bits| full(bits)))
}
