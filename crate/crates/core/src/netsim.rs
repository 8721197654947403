//! Deterministic discrete-event network simulator.
//!
//! A single global queue orders events by `(time, seq)`, where `seq` is a
//! counter assigned at scheduling time. Equal configurations and seeds
//! therefore replay the exact same event sequence.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::Rank;
use crate::util::mix_seed;

/// Simulated time in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct SimTime(u64);

const NANOS_PER_MILLI: f64 = 1_000_000.0;

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_nanos(nanos: u64) -> Self {
        SimTime(nanos)
    }

    /// Rounds to the nearest nanosecond. Negative or non-finite input is an error.
    pub fn from_millis(ms: f64) -> Result<Self, SimError> {
        if !ms.is_finite() || ms < 0.0 {
            return Err(SimError::InvalidTime(ms));
        }
        Ok(SimTime((ms * NANOS_PER_MILLI).round() as u64))
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_millis(self) -> f64 {
        self.0 as f64 / NANOS_PER_MILLI
    }

    pub fn saturating_add(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(other.0))
    }
}

impl std::ops::Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl std::ops::Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.as_millis())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("event at {at} scheduled before current time {now}")]
    TimeTravel { at: SimTime, now: SimTime },
    #[error("invalid time value {0} ms")]
    InvalidTime(f64),
    #[error("rank {rank} out of range for {processes} processes")]
    InvalidRank { rank: Rank, processes: usize },
    #[error("event budget of {0} events exhausted")]
    BudgetExhausted(u64),
    #[error("channel {from}->{to} delivered sequence {got}, expected {expected}")]
    ChannelOrder {
        from: Rank,
        to: Rank,
        got: u64,
        expected: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventPayload {
    MessageArrival {
        from: Rank,
        channel_seq: u64,
        sent_at: SimTime,
        body: Vec<u8>,
    },
    ComputeDone {
        iteration: u64,
    },
    Timer {
        tag: u64,
    },
}

impl EventPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            EventPayload::MessageArrival { .. } => "message",
            EventPayload::ComputeDone { .. } => "compute_done",
            EventPayload::Timer { .. } => "timer",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub time: SimTime,
    pub target: Rank,
    pub payload: EventPayload,
}

#[derive(Debug)]
struct Queued {
    time: SimTime,
    seq: u64,
    event: SimEvent,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// Message latency: a fixed part plus an optional uniform jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModel {
    pub latency: SimTime,
    pub jitter: SimTime,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            latency: SimTime::from_nanos(1_000_000),
            jitter: SimTime::ZERO,
        }
    }
}

/// One line of the optional event trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub time: SimTime,
    pub seq: u64,
    pub target: Rank,
    pub kind: &'static str,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrafficStats {
    pub messages: u64,
    pub bytes: u64,
}

pub const DEFAULT_EVENT_BUDGET: u64 = 200_000_000;

pub struct Simulator {
    processes: usize,
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Queued>>,
    link: LinkModel,
    link_rng: ChaCha8Rng,
    // (next sequence number, latest scheduled arrival) per ordered pair
    send_side: HashMap<(Rank, Rank), (u64, SimTime)>,
    recv_side: HashMap<(Rank, Rank), u64>,
    traffic: TrafficStats,
    processed: u64,
    budget: u64,
    trace: Option<Vec<TraceEntry>>,
}

impl Simulator {
    pub fn new(processes: usize, link: LinkModel, seed: u64) -> Self {
        Simulator {
            processes,
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            link,
            link_rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x11_4e7)),
            send_side: HashMap::new(),
            recv_side: HashMap::new(),
            traffic: TrafficStats::default(),
            processed: 0,
            budget: DEFAULT_EVENT_BUDGET,
            trace: None,
        }
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = budget;
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn processes(&self) -> usize {
        self.processes
    }

    pub fn traffic(&self) -> TrafficStats {
        self.traffic
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn trace(&self) -> Option<&[TraceEntry]> {
        self.trace.as_deref()
    }

    fn check_rank(&self, rank: Rank) -> Result<(), SimError> {
        if rank >= self.processes {
            return Err(SimError::InvalidRank {
                rank,
                processes: self.processes,
            });
        }
        Ok(())
    }

    pub fn schedule(&mut self, event: SimEvent) -> Result<(), SimError> {
        if event.time < self.now {
            return Err(SimError::TimeTravel {
                at: event.time,
                now: self.now,
            });
        }
        self.check_rank(event.target)?;
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Queued {
            time: event.time,
            seq,
            event,
        }));
        Ok(())
    }

    pub fn schedule_after(&mut self, delay: SimTime, target: Rank, payload: EventPayload) -> Result<(), SimError> {
        self.schedule(SimEvent {
            time: self.now + delay,
            target,
            payload,
        })
    }

    /// Sends `body` from `from` to `to`. Arrival is `now + latency (+ jitter)`,
    /// clamped so that a channel never overtakes an earlier message.
    pub fn send(&mut self, from: Rank, to: Rank, body: Vec<u8>) -> Result<(), SimError> {
        self.check_rank(from)?;
        self.check_rank(to)?;
        let jitter = if self.link.jitter.as_nanos() > 0 {
            SimTime::from_nanos(self.link_rng.random_range(0..=self.link.jitter.as_nanos()))
        } else {
            SimTime::ZERO
        };
        let mut arrival = self.now + self.link.latency + jitter;
        let entry = self.send_side.entry((from, to)).or_insert((0, SimTime::ZERO));
        arrival = arrival.max(entry.1);
        let channel_seq = entry.0;
        *entry = (channel_seq + 1, arrival);
        self.traffic.messages += 1;
        self.traffic.bytes += body.len() as u64;
        let sent_at = self.now;
        self.schedule(SimEvent {
            time: arrival,
            target: to,
            payload: EventPayload::MessageArrival {
                from,
                channel_seq,
                sent_at,
                body,
            },
        })
    }

    /// Pops the next event and advances the clock to it.
    pub fn next_event(&mut self) -> Result<Option<SimEvent>, SimError> {
        let Some(Reverse(queued)) = self.queue.pop() else {
            return Ok(None);
        };
        if self.processed >= self.budget {
            return Err(SimError::BudgetExhausted(self.budget));
        }
        self.processed += 1;
        debug_assert!(queued.time >= self.now);
        self.now = queued.time;
        if let EventPayload::MessageArrival {
            from, channel_seq, ..
        } = &queued.event.payload
        {
            let expected = self.recv_side.entry((*from, queued.event.target)).or_insert(0);
            if *expected != *channel_seq {
                return Err(SimError::ChannelOrder {
                    from: *from,
                    to: queued.event.target,
                    got: *channel_seq,
                    expected: *expected,
                });
            }
            *expected += 1;
        }
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEntry {
                time: queued.time,
                seq: queued.seq,
                target: queued.event.target,
                kind: queued.event.payload.kind(),
            });
        }
        Ok(Some(queued.event))
    }

    /// Drains the queue through `handler` and returns the final time.
    pub fn run_until_idle<E, F>(&mut self, mut handler: F) -> Result<SimTime, E>
    where
        E: From<SimError>,
        F: FnMut(&mut Simulator, SimEvent) -> Result<(), E>,
    {
        while let Some(event) = self.next_event()? {
            handler(self, event)?;
        }
        Ok(self.now)
    }

    /// Writes the trace as tab-separated `time_ns seq target kind` lines.
    pub fn write_trace<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for entry in self.trace.iter().flatten() {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                entry.time.as_nanos(),
                entry.seq,
                entry.target,
                entry.kind
            )?;
        }
        Ok(())
    }
}

/// Straggler injection: `victims_per_iteration` ranks, chosen by a seeded
/// draw per iteration, take `extra_delay` longer to compute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StragglerPolicy {
    pub victims_per_iteration: usize,
    pub extra_delay_ms: f64,
    pub selection_seed: u64,
}

impl Default for StragglerPolicy {
    fn default() -> Self {
        StragglerPolicy {
            victims_per_iteration: 0,
            extra_delay_ms: 0.0,
            selection_seed: 0,
        }
    }
}

impl StragglerPolicy {
    /// The victims of `iteration`, sorted. Pure in `(selection_seed, iteration)`.
    pub fn victims(&self, iteration: u64, processes: usize) -> Vec<Rank> {
        let count = self.victims_per_iteration.min(processes);
        if count == 0 {
            return Vec::new();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.selection_seed, iteration));
        let mut victims = rand::seq::index::sample(&mut rng, processes, count).into_vec();
        victims.sort_unstable();
        victims
    }
}

/// Per-iteration compute cost and link behaviour of the simulated cluster.
///
/// `jitter_max_ms` adds a uniform `[0, jitter_max_ms]` draw to every compute
/// step. It is a stand-in for background noise; the straggler policy is the
/// calibrated part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DelayModel {
    pub base_compute_ms: f64,
    pub jitter_max_ms: f64,
    pub link_latency_ms: f64,
    pub link_jitter_ms: f64,
    pub straggler: StragglerPolicy,
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel {
            base_compute_ms: 100.0,
            jitter_max_ms: 0.0,
            link_latency_ms: 1.0,
            link_jitter_ms: 0.0,
            straggler: StragglerPolicy::default(),
        }
    }
}

impl DelayModel {
    pub fn validate(&self, processes: usize) -> Result<(), String> {
        let fields = [
            ("base_compute_ms", self.base_compute_ms),
            ("jitter_max_ms", self.jitter_max_ms),
            ("link_latency_ms", self.link_latency_ms),
            ("link_jitter_ms", self.link_jitter_ms),
            ("straggler.extra_delay_ms", self.straggler.extra_delay_ms),
        ];
        for (name, value) in fields {
            if !value.is_finite() || value < 0.0 {
                return Err(format!("{name} must be a non-negative number, got {value}"));
            }
        }
        if self.straggler.victims_per_iteration > processes {
            return Err(format!(
                "victims_per_iteration {} exceeds process count {processes}",
                self.straggler.victims_per_iteration
            ));
        }
        Ok(())
    }

    pub fn link(&self) -> Result<LinkModel, SimError> {
        Ok(LinkModel {
            latency: SimTime::from_millis(self.link_latency_ms)?,
            jitter: SimTime::from_millis(self.link_jitter_ms)?,
        })
    }
}

/// Compute time of `rank` for `iteration`: base + jitter + straggler penalty.
pub fn compute_delay(rank: Rank, iteration: u64, processes: usize, model: &DelayModel, seed: u64) -> Result<SimTime, SimError> {
    let mut ms = model.base_compute_ms;
    if model.jitter_max_ms > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, rank as u64), iteration));
        ms += rng.random_range(0.0..=model.jitter_max_ms);
    }
    if model.straggler.victims(iteration, processes).binary_search(&rank).is_ok() {
        ms += model.straggler.extra_delay_ms;
    }
    SimTime::from_millis(ms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(v: f64) -> SimTime {
        SimTime::from_millis(v).unwrap()
    }

    fn timer(time: SimTime, tag: u64) -> SimEvent {
        SimEvent {
            time,
            target: 0,
            payload: EventPayload::Timer { tag },
        }
    }

    fn drain_tags(sim: &mut Simulator) -> Vec<(SimTime, u64)> {
        let mut seen = Vec::new();
        sim.run_until_idle::<SimError, _>(|_, ev| {
            if let EventPayload::Timer { tag } = ev.payload {
                seen.push((ev.time, tag));
            }
            Ok(())
        })
        .unwrap();
        seen
    }

    #[test]
    fn delivers_in_time_order() {
        let mut sim = Simulator::new(1, LinkModel::default(), 0);
        sim.schedule(timer(ms(5.0), 5)).unwrap();
        sim.schedule(timer(ms(3.0), 3)).unwrap();
        assert_eq!(drain_tags(&mut sim), vec![(ms(3.0), 3), (ms(5.0), 5)]);
    }

    #[test]
    fn equal_times_keep_scheduling_order() {
        let mut sim = Simulator::new(1, LinkModel::default(), 0);
        for tag in [7, 1, 4] {
            sim.schedule(timer(ms(2.0), tag)).unwrap();
        }
        let tags: Vec<u64> = drain_tags(&mut sim).into_iter().map(|(_, t)| t).collect();
        assert_eq!(tags, vec![7, 1, 4]);
    }

    #[test]
    fn rejects_time_travel() {
        assert!(matches!(SimTime::from_millis(-1.0), Err(SimError::InvalidTime(_))));
        let mut sim = Simulator::new(1, LinkModel::default(), 0);
        sim.schedule(timer(ms(2.0), 0)).unwrap();
        drain_tags(&mut sim);
        let err = sim.schedule(timer(ms(1.0), 0)).unwrap_err();
        assert!(matches!(err, SimError::TimeTravel { .. }));
    }

    #[test]
    fn send_arrives_after_latency() {
        let link = LinkModel {
            latency: ms(2.0),
            jitter: SimTime::ZERO,
        };
        let mut sim = Simulator::new(2, link, 0);
        sim.send(0, 1, vec![1]).unwrap();
        let ev = sim.next_event().unwrap().unwrap();
        assert_eq!(ev.time, ms(2.0));
        assert_eq!(ev.target, 1);
        assert_eq!(sim.traffic(), TrafficStats { messages: 1, bytes: 1 });
    }

    #[test]
    fn self_send_is_legal() {
        let mut sim = Simulator::new(1, LinkModel::default(), 0);
        sim.send(0, 0, vec![]).unwrap();
        let ev = sim.next_event().unwrap().unwrap();
        assert_eq!(ev.time, ms(1.0));
        assert!(sim.send(0, 3, vec![]).is_err());
    }

    #[test]
    fn channels_stay_fifo_under_jitter() {
        let link = LinkModel {
            latency: ms(1.0),
            jitter: ms(5.0),
        };
        let mut sim = Simulator::new(2, link, 9);
        for step in 0..200u64 {
            sim.schedule(timer(SimTime::from_nanos(step * 100_000), step)).unwrap();
        }
        let mut order = Vec::new();
        sim.run_until_idle::<SimError, _>(|sim, ev| {
            match ev.payload {
                EventPayload::Timer { tag } => sim.send(0, 1, tag.to_le_bytes().to_vec())?,
                EventPayload::MessageArrival { sent_at, body, .. } => {
                    assert!(sent_at <= ev.time);
                    order.push(u64::from_le_bytes(body.try_into().unwrap()));
                }
                _ => {}
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(order, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn run_until_idle_on_empty_queue() {
        let mut sim = Simulator::new(1, LinkModel::default(), 0);
        assert_eq!(sim.run_until_idle::<SimError, _>(|_, _| Ok(())).unwrap(), SimTime::ZERO);
    }

    #[test]
    fn compute_chain_ends_at_t_millis() {
        let mut sim = Simulator::new(1, LinkModel::default(), 0);
        let iterations = 25;
        sim.schedule_after(ms(1.0), 0, EventPayload::ComputeDone { iteration: 0 }).unwrap();
        let end = sim
            .run_until_idle::<SimError, _>(|sim, ev| {
                if let EventPayload::ComputeDone { iteration } = ev.payload {
                    if iteration + 1 < iterations {
                        sim.schedule_after(ms(1.0), 0, EventPayload::ComputeDone { iteration: iteration + 1 })?;
                    }
                }
                Ok(())
            })
            .unwrap();
        assert_eq!(end, ms(25.0));
    }

    #[test]
    fn budget_stops_livelock() {
        let mut sim = Simulator::new(1, LinkModel::default(), 0).with_budget(10);
        sim.schedule(timer(SimTime::ZERO, 0)).unwrap();
        let err = sim
            .run_until_idle::<SimError, _>(|sim, _| sim.schedule_after(SimTime::ZERO, 0, EventPayload::Timer { tag: 0 }))
            .unwrap_err();
        assert_eq!(err, SimError::BudgetExhausted(10));
    }

    #[test]
    fn trace_is_reproducible() {
        let run = || {
            let link = LinkModel {
                latency: ms(1.0),
                jitter: ms(3.0),
            };
            let mut sim = Simulator::new(4, link, 17).with_trace();
            for r in 0..4 {
                sim.schedule(timer(ms(r as f64), r as u64)).unwrap();
            }
            sim.run_until_idle::<SimError, _>(|sim, ev| {
                if let EventPayload::Timer { tag } = ev.payload {
                    sim.send(ev.target, (tag as usize + 1) % 4, vec![0; 8])?;
                }
                Ok(())
            })
            .unwrap();
            let mut out = Vec::new();
            sim.write_trace(&mut out).unwrap();
            out
        };
        let first = run();
        assert!(!first.is_empty());
        assert_eq!(first, run());
        let text = String::from_utf8(first).unwrap();
        assert_eq!(text.lines().next().unwrap().split('\t').count(), 4);
    }

    #[test]
    fn straggler_victim_pays_extra() {
        let model = DelayModel {
            base_compute_ms: 100.0,
            jitter_max_ms: 0.0,
            link_latency_ms: 1.0,
            link_jitter_ms: 0.0,
            straggler: StragglerPolicy {
                victims_per_iteration: 2,
                extra_delay_ms: 320.0,
                selection_seed: 3,
            },
        };
        let victims = model.straggler.victims(11, 8);
        assert_eq!(victims.len(), 2);
        assert_eq!(victims, model.straggler.victims(11, 8));
        let victim = victims[0];
        let other = (0..8).find(|r| !victims.contains(r)).unwrap();
        assert_eq!(compute_delay(victim, 11, 8, &model, 0).unwrap(), ms(420.0));
        assert_eq!(compute_delay(other, 11, 8, &model, 0).unwrap(), ms(100.0));

        let calm = DelayModel {
            straggler: StragglerPolicy::default(),
            ..model
        };
        for r in 0..8 {
            assert_eq!(compute_delay(r, 11, 8, &calm, 0).unwrap(), ms(100.0));
        }
    }

    #[test]
    fn jitter_is_pure_and_bounded() {
        let model = DelayModel {
            jitter_max_ms: 10.0,
            ..DelayModel::default()
        };
        for it in 0..50 {
            let a = compute_delay(3, it, 8, &model, 5).unwrap();
            assert_eq!(a, compute_delay(3, it, 8, &model, 5).unwrap());
            assert!(a >= ms(100.0) && a <= ms(110.0));
        }
    }
}
