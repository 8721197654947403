//! Wait-avoiding group allreduce.
//!
//! Each simulated process owns one [`GroupEndpoint`], its always-responsive
//! communication context. The endpoint serves activations and exchange
//! phases from a [`SendBuffer`] snapshot, so a process that is still busy
//! computing contributes whatever model it last published.
//!
//! Instances are identified by their version (the training iteration).
//! Every endpoint runs versions strictly in order and at most once.

mod endpoint;
pub mod scenario;
pub mod wire;

pub use endpoint::{
    Completion, EndpointConfig, EndpointStats, GroupEndpoint, GroupSelection, InstanceKind, InstanceState,
    JoinOutcome, Outgoing, SendBuffer,
};
pub use wire::{WireError, WireMessage};

use thiserror::Error;

use crate::topology::{Rank, TopologyError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CollectiveError {
    #[error("rank {rank} joined version {version} after version {last}")]
    VersionRegression { rank: Rank, version: u64, last: u64 },
    #[error("rank {rank}: {kind} message for version {version} phase {phase} from {from} after that version completed")]
    StaleMessage {
        rank: Rank,
        from: Rank,
        kind: &'static str,
        version: u64,
        phase: u16,
    },
    #[error("rank {rank}: duplicate {kind} message for version {version} phase {phase} from {from}")]
    DuplicateMessage {
        rank: Rank,
        from: Rank,
        kind: &'static str,
        version: u64,
        phase: u16,
    },
    #[error("rank {rank}: version {version} phase {phase} expected data from {expected}, got {from}")]
    WrongPeer {
        rank: Rank,
        version: u64,
        phase: u16,
        expected: Rank,
        from: Rank,
    },
    #[error("rank {rank}: {kind} traffic for version {version}, which is not a {kind} iteration")]
    KindMismatch { rank: Rank, version: u64, kind: &'static str },
    #[error("rank {rank}: activation received but the collective is not wait-avoiding")]
    UnexpectedActivation { rank: Rank },
    #[error("rank {rank}: payload of {got} words, expected {expected}")]
    PayloadLength { rank: Rank, expected: usize, got: usize },
    #[error("rank {rank}: version {version} would start before synchronization point {sync}")]
    SyncSkipped { rank: Rank, version: u64, sync: u64 },
    #[error("rank {rank}: version {version} has no valid exchange partner in phase {phase}")]
    InvalidSchedule { rank: Rank, version: u64, phase: usize },
    #[error("rank {rank}: send buffer stamp went backwards from {from} to {to}")]
    StampRegression { rank: Rank, from: i64, to: i64 },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Reference butterfly allreduce over in-memory buffers, in the exact
/// reduction order the endpoints use (received + local, phase by phase).
/// `buffers.len()` must be a power of two.
pub fn butterfly_allreduce(buffers: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let processes = buffers.len();
    assert!(processes.is_power_of_two(), "butterfly needs a power-of-two world");
    let mut acc: Vec<Vec<f64>> = buffers.to_vec();
    let mut mask = 1;
    while mask < processes {
        let previous = acc.clone();
        for (rank, slot) in acc.iter_mut().enumerate() {
            let received = &previous[rank ^ mask];
            for (a, r) in slot.iter_mut().zip(received) {
                *a = r + *a;
            }
        }
        mask <<= 1;
    }
    acc
}
