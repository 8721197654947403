use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::wire::WireMessage;
use super::CollectiveError;
use crate::topology::{binomial_children, phase_masks_with, GroupingParams, MaskRule, Rank};
use crate::util::mix_seed;

/// Which rank pairs exchange in a group version.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupSelection {
    /// Butterfly phases selected by the mask rule.
    Butterfly(MaskRule),
    /// Butterfly over a per-version seeded relabelling of the ranks, which
    /// makes every group a uniformly random `S`-subset.
    RandomRelabel { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EndpointConfig {
    pub processes: usize,
    pub group_size: usize,
    /// Activation-driven (`true`) or blocking group allreduce.
    pub wait_avoiding: bool,
    pub selection: GroupSelection,
    /// Version `k` is a global synchronization point iff `(k + 1) % tau == 0`.
    pub sync_period: Option<u64>,
}

impl EndpointConfig {
    pub fn is_sync(&self, version: u64) -> bool {
        matches!(self.sync_period, Some(tau) if (version + 1) % tau == 0)
    }

    /// Smallest synchronization version strictly greater than `after`
    /// (or `>= 0` when `after` is `None`).
    fn next_sync(&self, after: Option<u64>) -> Option<u64> {
        let tau = self.sync_period?;
        let from = after.map_or(0, |a| a + 1);
        // smallest k >= from with (k + 1) % tau == 0
        Some((from + 1).div_ceil(tau) * tau - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceKind {
    Group,
    Sync,
}

impl InstanceKind {
    fn label(self) -> &'static str {
        match self {
            InstanceKind::Group => "group",
            InstanceKind::Sync => "sync",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceState {
    Inactive,
    Activated,
    Exchanging(u16),
    Complete,
}

/// The model a process exposes to its peers' exchanges.
#[derive(Debug, Clone, PartialEq)]
pub struct SendBuffer {
    payload: Vec<f64>,
    stamped_iteration: i64,
}

impl SendBuffer {
    /// Initial contents, stamped as iteration `-1`.
    pub fn initial(payload: Vec<f64>) -> Self {
        SendBuffer {
            payload,
            stamped_iteration: -1,
        }
    }

    pub fn payload(&self) -> &[f64] {
        &self.payload
    }

    pub fn stamped_iteration(&self) -> i64 {
        self.stamped_iteration
    }

    fn install(&mut self, rank: Rank, payload: Vec<f64>, stamp: i64) -> Result<(), CollectiveError> {
        if stamp < self.stamped_iteration {
            return Err(CollectiveError::StampRegression {
                rank,
                from: self.stamped_iteration,
                to: stamp,
            });
        }
        if payload.len() != self.payload.len() {
            return Err(CollectiveError::PayloadLength {
                rank,
                expected: self.payload.len(),
                got: payload.len(),
            });
        }
        // Whole-value replacement: readers see either the old or the new payload.
        self.payload = payload;
        self.stamped_iteration = stamp;
        Ok(())
    }
}

/// Result of one finished instance at one process.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub version: u64,
    pub kind: InstanceKind,
    /// Sum of one buffer per member (the whole world for sync instances).
    pub sum: Vec<f64>,
    /// The process's fresh model for this version was in the send buffer
    /// before the exchange read it.
    pub participated_timely: bool,
    /// Stamp of the buffer this process contributed.
    pub own_stamp: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum JoinOutcome {
    /// The exchange runs (or ran) with this process as a participant; the
    /// completion becomes available through [`GroupEndpoint::take_completion`].
    Active,
    /// The version finished before the caller's compute did.
    AlreadyDone(Completion),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub to: Rank,
    pub message: WireMessage,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EndpointStats {
    /// Versions in the order their exchange started.
    pub started: Vec<u64>,
    /// Versions this process activated as root.
    pub originated: Vec<u64>,
    pub activations_sent: u64,
    pub activations_dropped: u64,
    /// Versions first activated by incoming exchange data rather than an
    /// activation message.
    pub data_activations: u64,
}

#[derive(Debug)]
struct Instance {
    version: u64,
    kind: InstanceKind,
    peers: Vec<Rank>,
    phase: usize,
    sent_current: bool,
    acc: Vec<f64>,
    timely: bool,
    own_stamp: i64,
}

#[derive(Debug)]
struct EarlyData {
    from: Rank,
    kind: InstanceKind,
    payload: Vec<f64>,
}

/// Communication context of one process.
#[derive(Debug)]
pub struct GroupEndpoint {
    rank: Rank,
    cfg: EndpointConfig,
    buffer: SendBuffer,
    last_completed: Option<u64>,
    last_joined: Option<u64>,
    current: Option<Instance>,
    ready: BTreeMap<u64, InstanceKind>,
    forwarded: BTreeSet<u64>,
    early: BTreeMap<(u64, u16), EarlyData>,
    done: BTreeMap<u64, Completion>,
    stats: EndpointStats,
}

impl GroupEndpoint {
    pub fn new(rank: Rank, cfg: EndpointConfig, initial: Vec<f64>) -> Result<Self, CollectiveError> {
        GroupingParams::new(cfg.processes, cfg.group_size, 0)?;
        Ok(GroupEndpoint {
            rank,
            cfg,
            buffer: SendBuffer::initial(initial),
            last_completed: None,
            last_joined: None,
            current: None,
            ready: BTreeMap::new(),
            forwarded: BTreeSet::new(),
            early: BTreeMap::new(),
            done: BTreeMap::new(),
            stats: EndpointStats::default(),
        })
    }

    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    pub fn send_buffer(&self) -> &SendBuffer {
        &self.buffer
    }

    pub fn stats(&self) -> &EndpointStats {
        &self.stats
    }

    pub fn last_completed(&self) -> Option<u64> {
        self.last_completed
    }

    pub fn state(&self, version: u64) -> InstanceState {
        if self.last_completed.is_some_and(|lc| version <= lc) {
            InstanceState::Complete
        } else if let Some(cur) = self.current.as_ref().filter(|c| c.version == version) {
            InstanceState::Exchanging(cur.phase as u16)
        } else if self.ready.contains_key(&version) {
            InstanceState::Activated
        } else {
            InstanceState::Inactive
        }
    }

    /// Removes and returns the completion of `version` if it has finished.
    pub fn take_completion(&mut self, version: u64) -> Option<Completion> {
        self.done.remove(&version)
    }

    /// Group peers of this rank for `version`, one per phase.
    pub fn group_peers(&self, version: u64) -> Result<Vec<Rank>, CollectiveError> {
        let processes = self.cfg.processes;
        let params = GroupingParams::new(processes, self.cfg.group_size, version)?;
        let (rule, relabel) = match self.cfg.selection {
            GroupSelection::Butterfly(rule) => (rule, None),
            GroupSelection::RandomRelabel { seed } => (MaskRule::Rotating, Some(seed)),
        };
        let masks = phase_masks_with(params, rule).masks;
        let labels = relabel.map(|seed| {
            let mut order: Vec<Rank> = (0..processes).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, version)));
            let mut inverse = vec![0; processes];
            for (virt, &phys) in order.iter().enumerate() {
                inverse[phys] = virt;
            }
            (order, inverse)
        });
        masks
            .iter()
            .enumerate()
            .map(|(phase, &mask)| {
                if mask == 0 || mask >= processes {
                    return Err(CollectiveError::InvalidSchedule {
                        rank: self.rank,
                        version,
                        phase,
                    });
                }
                Ok(match &labels {
                    None => self.rank ^ mask,
                    Some((order, inverse)) => order[inverse[self.rank] ^ mask],
                })
            })
            .collect()
    }

    fn sync_peers(&self) -> Vec<Rank> {
        let global = self.cfg.processes.trailing_zeros();
        (0..global).map(|bit| self.rank ^ (1 << bit)).collect()
    }

    fn check_join(&mut self, version: u64) -> Result<(), CollectiveError> {
        let floor = match (self.last_joined, self.last_completed) {
            (Some(j), Some(c)) => Some(j.max(c)),
            (j, c) => j.or(c),
        };
        if let Some(last) = self.last_joined.filter(|&j| version <= j) {
            return Err(CollectiveError::VersionRegression {
                rank: self.rank,
                version,
                last,
            });
        }
        // A completed version that is no longer pickup-able was consumed already.
        if let Some(last) = floor.filter(|&f| version <= f && !self.done.contains_key(&version)) {
            return Err(CollectiveError::VersionRegression {
                rank: self.rank,
                version,
                last,
            });
        }
        self.last_joined = Some(version);
        Ok(())
    }

    /// Compute context reached the group allreduce of `version` holding `fresh`.
    pub fn join_or_check(
        &mut self,
        version: u64,
        fresh: Vec<f64>,
        out: &mut Vec<Outgoing>,
    ) -> Result<JoinOutcome, CollectiveError> {
        if self.cfg.is_sync(version) {
            return Err(CollectiveError::KindMismatch {
                rank: self.rank,
                version,
                kind: InstanceKind::Group.label(),
            });
        }
        self.check_join(version)?;
        self.buffer.install(self.rank, fresh, version as i64)?;
        if let Some(done) = self.done.remove(&version) {
            return Ok(JoinOutcome::AlreadyDone(done));
        }
        let already = self.current.as_ref().is_some_and(|c| c.version == version) || self.ready.contains_key(&version);
        if !already {
            if self.cfg.wait_avoiding && self.cfg.group_size > 1 && self.forwarded.insert(version) {
                self.stats.originated.push(version);
                self.forward_activation(version, self.rank, 0, out);
            }
            self.ready.insert(version, InstanceKind::Group);
        }
        self.advance(out)?;
        Ok(JoinOutcome::Active)
    }

    /// Compute context reached the global synchronization of `version`.
    pub fn sync_join(&mut self, version: u64, fresh: Vec<f64>, out: &mut Vec<Outgoing>) -> Result<(), CollectiveError> {
        if !self.cfg.is_sync(version) {
            return Err(CollectiveError::KindMismatch {
                rank: self.rank,
                version,
                kind: InstanceKind::Sync.label(),
            });
        }
        self.check_join(version)?;
        self.buffer.install(self.rank, fresh, version as i64)?;
        self.ready.insert(version, InstanceKind::Sync);
        self.advance(out)
    }

    pub fn on_message(&mut self, from: Rank, message: WireMessage, out: &mut Vec<Outgoing>) -> Result<(), CollectiveError> {
        match message {
            WireMessage::Activate { version, root, hop } => self.on_activation(version, root, hop, out),
            WireMessage::Phase {
                version,
                phase,
                payload,
            } => self.on_data(from, InstanceKind::Group, version, phase, payload, out),
            WireMessage::Sync {
                version,
                phase,
                payload,
            } => self.on_data(from, InstanceKind::Sync, version, phase, payload, out),
        }
    }

    fn on_activation(&mut self, version: u64, root: Rank, hop: u16, out: &mut Vec<Outgoing>) -> Result<(), CollectiveError> {
        if !self.cfg.wait_avoiding {
            return Err(CollectiveError::UnexpectedActivation { rank: self.rank });
        }
        if self.cfg.is_sync(version) {
            return Err(CollectiveError::KindMismatch {
                rank: self.rank,
                version,
                kind: InstanceKind::Group.label(),
            });
        }
        if self.last_completed.is_some_and(|lc| version <= lc) || !self.forwarded.insert(version) {
            self.stats.activations_dropped += 1;
            return Ok(());
        }
        self.forward_activation(version, root, hop, out);
        let running = self.current.as_ref().is_some_and(|c| c.version == version);
        if !running {
            self.ready.entry(version).or_insert(InstanceKind::Group);
        }
        self.advance(out)
    }

    fn forward_activation(&mut self, version: u64, root: Rank, hop: u16, out: &mut Vec<Outgoing>) {
        for child in binomial_children(root, self.rank, self.cfg.processes) {
            self.stats.activations_sent += 1;
            out.push(Outgoing {
                to: child,
                message: WireMessage::Activate {
                    version,
                    root,
                    hop: hop + 1,
                },
            });
        }
    }

    fn on_data(
        &mut self,
        from: Rank,
        kind: InstanceKind,
        version: u64,
        phase: u16,
        payload: Vec<f64>,
        out: &mut Vec<Outgoing>,
    ) -> Result<(), CollectiveError> {
        if self.cfg.is_sync(version) != (kind == InstanceKind::Sync) {
            return Err(CollectiveError::KindMismatch {
                rank: self.rank,
                version,
                kind: kind.label(),
            });
        }
        let stale = self.last_completed.is_some_and(|lc| version <= lc)
            || self
                .current
                .as_ref()
                .is_some_and(|c| c.version == version && (phase as usize) < c.phase);
        if stale {
            return Err(CollectiveError::StaleMessage {
                rank: self.rank,
                from,
                kind: kind.label(),
                version,
                phase,
            });
        }
        if payload.len() != self.buffer.payload.len() {
            return Err(CollectiveError::PayloadLength {
                rank: self.rank,
                expected: self.buffer.payload.len(),
                got: payload.len(),
            });
        }
        if self.early.contains_key(&(version, phase)) {
            return Err(CollectiveError::DuplicateMessage {
                rank: self.rank,
                from,
                kind: kind.label(),
                version,
                phase,
            });
        }
        self.early.insert((version, phase), EarlyData { from, kind, payload });
        let running = self.current.as_ref().is_some_and(|c| c.version == version);
        if kind == InstanceKind::Group && self.cfg.wait_avoiding && !running && !self.ready.contains_key(&version) {
            // A peer is already exchanging this version, so it has been
            // activated; join passively even if our activation was cut.
            self.stats.data_activations += 1;
            self.ready.insert(version, InstanceKind::Group);
        }
        self.advance(out)
    }

    fn start_next(&mut self) -> Result<bool, CollectiveError> {
        let Some((&version, &kind)) = self.ready.iter().next() else {
            return Ok(false);
        };
        if kind == InstanceKind::Group {
            if let Some(sync) = self.cfg.next_sync(self.last_completed).filter(|&k| k < version) {
                return Err(CollectiveError::SyncSkipped {
                    rank: self.rank,
                    version,
                    sync,
                });
            }
        }
        // Activations from different roots race; hold later versions until
        // their predecessor has finished here. Without wait-avoidance only
        // the compute context joins, already in order and possibly sparse.
        if self.cfg.wait_avoiding && version > self.last_completed.map_or(0, |c| c + 1) {
            return Ok(false);
        }
        let peers = match kind {
            InstanceKind::Group => self.group_peers(version)?,
            InstanceKind::Sync => self.sync_peers(),
        };
        self.ready.remove(&version);
        let own_stamp = self.buffer.stamped_iteration;
        self.stats.started.push(version);
        self.current = Some(Instance {
            version,
            kind,
            peers,
            phase: 0,
            sent_current: false,
            acc: self.buffer.payload.clone(),
            timely: own_stamp == version as i64,
            own_stamp,
        });
        Ok(true)
    }

    fn advance(&mut self, out: &mut Vec<Outgoing>) -> Result<(), CollectiveError> {
        loop {
            if self.current.is_none() && !self.start_next()? {
                return Ok(());
            }
            let rank = self.rank;
            let inst = self.current.as_mut().expect("instance present");
            if inst.phase == inst.peers.len() {
                let inst = self.current.take().expect("instance present");
                self.finish(inst);
                continue;
            }
            let peer = inst.peers[inst.phase];
            let phase = inst.phase as u16;
            if !inst.sent_current {
                inst.sent_current = true;
                let payload = inst.acc.clone();
                let message = match inst.kind {
                    InstanceKind::Group => WireMessage::Phase {
                        version: inst.version,
                        phase,
                        payload,
                    },
                    InstanceKind::Sync => WireMessage::Sync {
                        version: inst.version,
                        phase,
                        payload,
                    },
                };
                out.push(Outgoing { to: peer, message });
            }
            let Some(data) = self.early.remove(&(inst.version, phase)) else {
                return Ok(());
            };
            if data.from != peer || data.kind != inst.kind {
                return Err(CollectiveError::WrongPeer {
                    rank,
                    version: inst.version,
                    phase,
                    expected: peer,
                    from: data.from,
                });
            }
            // received + local, the fixed reduction order
            for (a, r) in inst.acc.iter_mut().zip(&data.payload) {
                *a = r + *a;
            }
            inst.phase += 1;
            inst.sent_current = false;
        }
    }

    fn finish(&mut self, inst: Instance) {
        self.last_completed = Some(inst.version);
        let cutoff = inst.version;
        self.forwarded.retain(|&v| v > cutoff);
        self.done.insert(
            inst.version,
            Completion {
                version: inst.version,
                kind: inst.kind,
                sum: inst.acc,
                participated_timely: inst.timely,
                own_stamp: inst.own_stamp,
            },
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(processes: usize, group_size: usize, tau: Option<u64>) -> EndpointConfig {
        EndpointConfig {
            processes,
            group_size,
            wait_avoiding: true,
            selection: GroupSelection::Butterfly(MaskRule::Rotating),
            sync_period: tau,
        }
    }

    /// Delivers messages instantly, in FIFO order, until quiet.
    fn pump(eps: &mut [GroupEndpoint], mut queue: Vec<(Rank, Outgoing)>) -> usize {
        let mut delivered = 0;
        while !queue.is_empty() {
            let (from, msg) = queue.remove(0);
            let mut out = Vec::new();
            eps[msg.to].on_message(from, msg.message, &mut out).unwrap();
            let to = msg.to;
            queue.extend(out.into_iter().map(|o| (to, o)));
            delivered += 1;
        }
        delivered
    }

    #[test]
    fn lone_activator_emits_p_minus_one_activations() {
        let mut eps: Vec<GroupEndpoint> = (0..8)
            .map(|r| GroupEndpoint::new(r, cfg(8, 4, None), vec![0.0]).unwrap())
            .collect();
        let mut out = Vec::new();
        assert_eq!(eps[1].join_or_check(0, vec![1.0], &mut out).unwrap(), JoinOutcome::Active);
        let acts = out.iter().filter(|o| matches!(o.message, WireMessage::Activate { .. })).count();
        assert_eq!(acts, 3);
        pump(&mut eps, out.into_iter().map(|o| (1, o)).collect());
        let total: u64 = eps.iter().map(|e| e.stats().activations_sent).sum();
        assert_eq!(total, 7);
        for e in &eps {
            assert_eq!(e.state(0), InstanceState::Complete);
            assert_eq!(e.stats().started, vec![0]);
        }
    }

    #[test]
    fn passive_members_contribute_stale_buffers() {
        // P=4, S=2: rank 0 activates, everyone else still computes.
        let mut eps: Vec<GroupEndpoint> = (0..4)
            .map(|r| GroupEndpoint::new(r, cfg(4, 2, None), vec![10.0 * r as f64]).unwrap())
            .collect();
        let mut out = Vec::new();
        eps[0].join_or_check(0, vec![1.0], &mut out).unwrap();
        pump(&mut eps, out.into_iter().map(|o| (0, o)).collect());
        let c0 = eps[0].take_completion(0).unwrap();
        assert!(c0.participated_timely);
        assert_eq!(c0.sum, vec![1.0 + 10.0]);

        // Rank 1 finishes late: the version is already done.
        match eps[1].join_or_check(0, vec![2.0], &mut Vec::new()).unwrap() {
            JoinOutcome::AlreadyDone(c) => {
                assert!(!c.participated_timely);
                assert_eq!(c.own_stamp, -1);
                assert_eq!(c.sum, vec![11.0]);
            }
            other => panic!("unexpected {other:?}"),
        }
        // The fresh model stays published for later pulls.
        assert_eq!(eps[1].send_buffer().payload(), &[2.0]);
        assert_eq!(eps[1].send_buffer().stamped_iteration(), 0);
    }

    #[test]
    fn duplicate_and_late_activations_are_dropped() {
        let mut ep = GroupEndpoint::new(2, cfg(4, 2, None), vec![0.0]).unwrap();
        let mut out = Vec::new();
        ep.on_message(0, WireMessage::Activate { version: 0, root: 0, hop: 1 }, &mut out)
            .unwrap();
        let first = out.len();
        assert!(first > 0);
        ep.on_message(3, WireMessage::Activate { version: 0, root: 3, hop: 1 }, &mut out)
            .unwrap();
        assert_eq!(out.len(), first);
        assert_eq!(ep.stats().activations_dropped, 1);
        assert_eq!(ep.stats().started, vec![0]);
    }

    #[test]
    fn later_activation_waits_for_predecessor() {
        let mut ep = GroupEndpoint::new(0, cfg(4, 2, None), vec![0.0]).unwrap();
        let mut out = Vec::new();
        ep.on_message(2, WireMessage::Activate { version: 1, root: 2, hop: 1 }, &mut out)
            .unwrap();
        assert!(ep.stats().started.is_empty());
        assert_eq!(ep.state(1), InstanceState::Activated);
        ep.on_message(1, WireMessage::Activate { version: 0, root: 1, hop: 1 }, &mut out)
            .unwrap();
        assert_eq!(ep.stats().started, vec![0]);
        let peer0 = ep.group_peers(0).unwrap()[0];
        ep.on_message(peer0, WireMessage::Phase { version: 0, phase: 0, payload: vec![1.0] }, &mut out)
            .unwrap();
        assert_eq!(ep.stats().started, vec![0, 1]);
    }

    #[test]
    fn activation_after_completion_emits_nothing() {
        let mut ep = GroupEndpoint::new(0, cfg(2, 1, None), vec![3.0]).unwrap();
        let mut out = Vec::new();
        ep.join_or_check(0, vec![4.0], &mut out).unwrap();
        assert!(out.is_empty(), "S=1 needs no traffic");
        assert_eq!(ep.take_completion(0).unwrap().sum, vec![4.0]);
        let mut wa = GroupEndpoint::new(0, cfg(4, 2, None), vec![0.0]).unwrap();
        wa.on_message(1, WireMessage::Activate { version: 0, root: 1, hop: 1 }, &mut out)
            .unwrap();
        wa.on_message(1, WireMessage::Phase { version: 0, phase: 0, payload: vec![1.0] }, &mut out)
            .unwrap();
        assert_eq!(wa.state(0), InstanceState::Complete);
        out.clear();
        wa.on_message(2, WireMessage::Activate { version: 0, root: 2, hop: 1 }, &mut out)
            .unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn version_regression_is_rejected() {
        let mut ep = GroupEndpoint::new(0, cfg(1, 1, None), vec![0.0]).unwrap();
        let mut out = Vec::new();
        ep.join_or_check(0, vec![0.0], &mut out).unwrap();
        ep.join_or_check(1, vec![0.0], &mut out).unwrap();
        let err = ep.join_or_check(0, vec![0.0], &mut out).unwrap_err();
        assert!(matches!(err, CollectiveError::VersionRegression { .. }));
    }

    #[test]
    fn mismatched_phase_is_a_fault() {
        let mut ep = GroupEndpoint::new(0, cfg(4, 2, Some(4)), vec![0.0]).unwrap();
        let mut out = Vec::new();
        let err = ep
            .on_message(1, WireMessage::Sync { version: 0, phase: 0, payload: vec![1.0] }, &mut out)
            .unwrap_err();
        assert!(matches!(err, CollectiveError::KindMismatch { .. }));
        ep.join_or_check(0, vec![1.0], &mut out).unwrap();
        let err = ep
            .on_message(2, WireMessage::Phase { version: 0, phase: 0, payload: vec![1.0] }, &mut out)
            .unwrap_err();
        assert!(matches!(err, CollectiveError::WrongPeer { .. }));
    }

    #[test]
    fn stale_data_after_completion_is_a_fault() {
        let mut ep = GroupEndpoint::new(0, cfg(2, 2, None), vec![0.0]).unwrap();
        let mut out = Vec::new();
        ep.join_or_check(0, vec![1.0], &mut out).unwrap();
        ep.on_message(1, WireMessage::Phase { version: 0, phase: 0, payload: vec![2.0] }, &mut out)
            .unwrap();
        let err = ep
            .on_message(1, WireMessage::Phase { version: 0, phase: 0, payload: vec![2.0] }, &mut out)
            .unwrap_err();
        assert!(matches!(err, CollectiveError::StaleMessage { .. }));
    }

    #[test]
    fn blocking_mode_waits_for_own_join() {
        let mut c = cfg(2, 2, None);
        c.wait_avoiding = false;
        let mut ep = GroupEndpoint::new(0, c, vec![5.0]).unwrap();
        let mut out = Vec::new();
        ep.on_message(1, WireMessage::Phase { version: 0, phase: 0, payload: vec![2.0] }, &mut out)
            .unwrap();
        assert_eq!(ep.state(0), InstanceState::Inactive);
        assert!(out.is_empty());
        ep.join_or_check(0, vec![1.0], &mut out).unwrap();
        let done = ep.take_completion(0).unwrap();
        assert!(done.participated_timely);
        assert_eq!(done.sum, vec![3.0]);
        let err = ep
            .on_message(1, WireMessage::Activate { version: 1, root: 1, hop: 1 }, &mut out)
            .unwrap_err();
        assert_eq!(err, CollectiveError::UnexpectedActivation { rank: 0 });
    }

    #[test]
    fn group_versions_wait_for_sync() {
        // tau = 2: version 1 is a sync point.
        let mut ep = GroupEndpoint::new(0, cfg(2, 2, Some(2)), vec![0.0]).unwrap();
        let mut out = Vec::new();
        ep.join_or_check(0, vec![1.0], &mut out).unwrap();
        ep.on_message(1, WireMessage::Phase { version: 0, phase: 0, payload: vec![1.0] }, &mut out)
            .unwrap();
        ep.take_completion(0).unwrap();
        ep.sync_join(1, vec![1.0], &mut out).unwrap();
        // The peer finished the sync and already exchanges version 2.
        ep.on_message(1, WireMessage::Sync { version: 1, phase: 0, payload: vec![1.0] }, &mut out)
            .unwrap();
        assert_eq!(ep.take_completion(1).unwrap().sum, vec![2.0]);
        ep.on_message(1, WireMessage::Phase { version: 2, phase: 0, payload: vec![7.0] }, &mut out)
            .unwrap();
        assert_eq!(ep.state(2), InstanceState::Complete);
        assert_eq!(ep.stats().data_activations, 1);
    }

    #[test]
    fn data_for_a_group_beyond_an_unfinished_sync_is_a_fault() {
        let mut ep = GroupEndpoint::new(0, cfg(2, 2, Some(2)), vec![0.0]).unwrap();
        let mut out = Vec::new();
        let err = ep
            .on_message(1, WireMessage::Phase { version: 2, phase: 0, payload: vec![7.0] }, &mut out)
            .unwrap_err();
        assert!(matches!(err, CollectiveError::SyncSkipped { sync: 1, .. }));
    }

    #[test]
    fn random_relabel_groups_are_consistent() {
        let c = EndpointConfig {
            selection: GroupSelection::RandomRelabel { seed: 5 },
            ..cfg(16, 4, None)
        };
        let eps: Vec<GroupEndpoint> = (0..16).map(|r| GroupEndpoint::new(r, c, vec![0.0]).unwrap()).collect();
        for version in 0..6 {
            for ep in &eps {
                let peers = ep.group_peers(version).unwrap();
                for (phase, &q) in peers.iter().enumerate() {
                    assert_eq!(eps[q].group_peers(version).unwrap()[phase], ep.rank());
                }
            }
        }
    }

    #[test]
    fn next_sync_arithmetic() {
        let c = cfg(2, 2, Some(10));
        assert_eq!(c.next_sync(None), Some(9));
        assert_eq!(c.next_sync(Some(8)), Some(9));
        assert_eq!(c.next_sync(Some(9)), Some(19));
        assert!(c.is_sync(9) && c.is_sync(19) && !c.is_sync(10));
        assert_eq!(cfg(2, 2, None).next_sync(Some(3)), None);
    }
}
