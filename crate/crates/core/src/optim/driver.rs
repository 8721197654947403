use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::diagnostics::{compute_diagnostics, MetricsRecord};
use super::{group_average, Algorithm, OptimError, OptimizerConfig, WorkerState};
use crate::collective::{CollectiveError, Completion, GroupEndpoint, JoinOutcome, Outgoing, WireMessage};
use crate::netsim::{compute_delay, DelayModel, EventPayload, SimTime, Simulator, TrafficStats};
use crate::problems::{partition, Batch, Problem};
use crate::topology::Rank;
use crate::util::mix_seed;

const STREAM_BATCH: u64 = 0xba7c;
const STREAM_COMPUTE: u64 = 0xde1a;
const STREAM_LINK: u64 = 0x11c;
const STREAM_PARTNER: u64 = 0xad;

/// Minibatch sampler of `rank` for a run seeded with `seed`.
pub fn worker_rng(seed: u64, rank: Rank) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, STREAM_BATCH), rank as u64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub iterations: u64,
    pub final_time: SimTime,
    pub traffic: TrafficStats,
    /// Replica snapshots of the last recorded iteration.
    pub final_replicas: Vec<Vec<f64>>,
    pub final_mu: Vec<f64>,
    pub final_loss: f64,
    pub final_grad_norm_sq: f64,
    pub final_accuracy: Option<f64>,
    pub max_gamma: f64,
    pub max_staleness: u64,
    /// Largest minibatch gradient norm any worker computed.
    pub m_hat: f64,
    pub activations: u64,
    pub events: u64,
}

impl RunSummary {
    pub fn time_per_iteration_ms(&self) -> f64 {
        self.final_time.as_millis() / self.iterations as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Wait {
    Computing,
    Group(u64),
    Sync(u64),
    Ring(u64),
    Pair(u64),
    Finished,
}

struct Worker {
    state: WorkerState,
    endpoint: Option<GroupEndpoint>,
    rng: ChaCha8Rng,
    shard: Vec<usize>,
    // Model change of the current iteration (the raw gradient for allreduce).
    pending: Vec<f64>,
    wait: Wait,
    stash: Option<Completion>,
    inbox: BTreeMap<(u64, Rank), Vec<f64>>,
}

struct Slot {
    replicas: Vec<Option<Vec<f64>>>,
    filled: usize,
    staleness: u64,
}

struct Driver<'a, F> {
    cfg: &'a OptimizerConfig,
    problem: &'a dyn Problem,
    delay: &'a DelayModel,
    seed: u64,
    workers: Vec<Worker>,
    slots: BTreeMap<u64, Slot>,
    records: Vec<MetricsRecord>,
    last_replicas: Vec<Vec<f64>>,
    m_hat: f64,
    max_gamma: f64,
    max_staleness: u64,
    observer: F,
}

/// Runs `cfg.iterations` iterations on every worker. Deterministic in
/// `(cfg, problem, delay, seed)`.
pub fn run_training(
    cfg: &OptimizerConfig,
    problem: &dyn Problem,
    delay: &DelayModel,
    seed: u64,
) -> Result<TrainingRun, OptimError> {
    run_training_observed(cfg, problem, delay, seed, |_, _| {})
}

/// Like [`run_training`], calling `observer` with every record and the
/// replica snapshots it was computed from.
pub fn run_training_observed<F>(
    cfg: &OptimizerConfig,
    problem: &dyn Problem,
    delay: &DelayModel,
    seed: u64,
    observer: F,
) -> Result<TrainingRun, OptimError>
where
    F: FnMut(&MetricsRecord, &[Vec<f64>]),
{
    cfg.validate()?;
    let p = cfg.processes;
    delay.validate(p).map_err(OptimError::InvalidConfig)?;
    let shards = partition(problem.num_samples(), p, seed)?;
    let initial = problem.initial_point();
    let ecfg = cfg.endpoint_config();
    let mut workers = Vec::with_capacity(p);
    for (rank, shard) in shards.into_iter().enumerate() {
        let endpoint = match cfg.algorithm.uses_butterfly() {
            true => Some(GroupEndpoint::new(rank, ecfg, initial.clone())?),
            false => None,
        };
        workers.push(Worker {
            state: WorkerState::new(rank, initial.clone()),
            endpoint,
            rng: worker_rng(seed, rank),
            shard,
            pending: Vec::new(),
            wait: Wait::Computing,
            stash: None,
            inbox: BTreeMap::new(),
        });
    }
    let mut driver = Driver {
        cfg,
        problem,
        delay,
        seed,
        workers,
        slots: BTreeMap::new(),
        records: Vec::with_capacity(cfg.iterations as usize),
        last_replicas: Vec::new(),
        m_hat: 0.0,
        max_gamma: 0.0,
        max_staleness: 0,
        observer,
    };

    let mut sim = Simulator::new(p, delay.link()?, mix_seed(seed, STREAM_LINK));
    for rank in 0..p {
        driver.start_iteration(&mut sim, rank)?;
    }
    let final_time = sim.run_until_idle::<OptimError, _>(|sim, event| {
        let rank = event.target;
        match event.payload {
            EventPayload::ComputeDone { iteration } => driver.on_compute_done(sim, rank, iteration)?,
            EventPayload::MessageArrival { from, body, .. } => driver.on_message(sim, rank, from, &body)?,
            EventPayload::Timer { .. } => {}
        }
        driver.flush(sim)
    })?;

    let stuck: Vec<String> = driver
        .workers
        .iter()
        .filter(|w| w.wait != Wait::Finished)
        .map(|w| format!("rank {} at iteration {} ({:?})", w.state.rank, w.state.iter, w.wait))
        .collect();
    if !stuck.is_empty() || driver.records.len() as u64 != cfg.iterations {
        return Err(OptimError::Stalled(stuck.join(", ")));
    }

    let last = compute_diagnostics(&driver.last_replicas, problem);
    let activations = driver
        .workers
        .iter()
        .filter_map(|w| w.endpoint.as_ref())
        .map(|e| e.stats().activations_sent)
        .sum();
    let summary = RunSummary {
        iterations: cfg.iterations,
        final_time,
        traffic: sim.traffic(),
        final_accuracy: problem.accuracy(&last.mu),
        final_loss: last.loss_mu,
        final_grad_norm_sq: last.grad_norm_sq_mu,
        final_mu: last.mu,
        final_replicas: driver.last_replicas,
        max_gamma: driver.max_gamma,
        max_staleness: driver.max_staleness,
        m_hat: driver.m_hat,
        activations,
        events: sim.processed(),
    };
    Ok(TrainingRun {
        records: driver.records,
        summary,
    })
}

/// Distinct ring neighbours of `rank`, excluding itself.
fn ring_neighbors(rank: Rank, processes: usize) -> Vec<Rank> {
    let left = (rank + processes - 1) % processes;
    let right = (rank + 1) % processes;
    let mut out = Vec::with_capacity(2);
    for n in [left, right] {
        if n != rank && !out.contains(&n) {
            out.push(n);
        }
    }
    out
}

fn protocol(msg: String) -> OptimError {
    OptimError::Protocol(msg)
}

impl<F> Driver<'_, F>
where
    F: FnMut(&MetricsRecord, &[Vec<f64>]),
{
    fn start_iteration(&mut self, sim: &mut Simulator, rank: Rank) -> Result<(), OptimError> {
        let cfg = self.cfg;
        let worker = &mut self.workers[rank];
        let t = worker.state.iter;
        if t >= cfg.iterations {
            worker.wait = Wait::Finished;
            return Ok(());
        }
        let eta = cfg.learning_rate.at(t, cfg.processes, cfg.iterations);
        let batch = Batch::draw(&worker.shard, cfg.batch_size, &mut worker.rng);
        let mut g = vec![0.0; worker.state.w.len()];
        let norm = worker.state.batch_gradient(self.problem, &batch, &mut g)?;
        self.m_hat = self.m_hat.max(norm);
        worker.pending = match cfg.algorithm {
            Algorithm::Allreduce => g,
            _ => worker.state.update(&g, eta, cfg.update_rule),
        };
        worker.wait = Wait::Computing;
        let delay = compute_delay(rank, t, cfg.processes, self.delay, mix_seed(self.seed, STREAM_COMPUTE))?;
        sim.schedule_after(delay, rank, EventPayload::ComputeDone { iteration: t })?;
        Ok(())
    }

    fn on_compute_done(&mut self, sim: &mut Simulator, rank: Rank, t: u64) -> Result<(), OptimError> {
        let cfg = self.cfg;
        let p = cfg.processes;
        let worker = &mut self.workers[rank];
        if worker.wait != Wait::Computing || worker.state.iter != t {
            return Err(protocol(format!(
                "rank {rank}: compute of iteration {t} finished while in {:?} at iteration {}",
                worker.wait, worker.state.iter
            )));
        }
        let mut out = Vec::new();
        match cfg.algorithm {
            Algorithm::Allreduce => {
                let g = std::mem::take(&mut worker.pending);
                endpoint(worker)?.sync_join(t, g, &mut out)?;
                worker.wait = Wait::Sync(t);
            }
            Algorithm::Wagma | Algorithm::LocalSgd => {
                worker.state.apply(&worker.pending);
                let fresh = worker.state.w_prime.clone();
                if cfg.is_sync(t) {
                    endpoint(worker)?.sync_join(t, fresh, &mut out)?;
                    worker.wait = Wait::Sync(t);
                } else if cfg.group_collective() {
                    if let JoinOutcome::AlreadyDone(done) = endpoint(worker)?.join_or_check(t, fresh, &mut out)? {
                        worker.stash = Some(done);
                    }
                    worker.wait = Wait::Group(t);
                } else {
                    self.finish_iteration(sim, rank, fresh, 0)?;
                }
            }
            Algorithm::Dpsgd => {
                worker.state.apply(&worker.pending);
                for n in ring_neighbors(rank, p) {
                    out.push(Outgoing {
                        to: n,
                        message: WireMessage::Phase {
                            version: t,
                            phase: 0,
                            payload: worker.state.w_prime.clone(),
                        },
                    });
                }
                worker.wait = Wait::Ring(t);
            }
            Algorithm::Adpsgd => {
                worker.state.apply(&worker.pending);
                if p == 1 {
                    let fresh = worker.state.w_prime.clone();
                    self.finish_iteration(sim, rank, fresh, 0)?;
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                        mix_seed(self.seed, STREAM_PARTNER),
                        ((rank as u64) << 32) | t,
                    ));
                    let mut partner = rng.random_range(0..p - 1);
                    if partner >= rank {
                        partner += 1;
                    }
                    out.push(Outgoing {
                        to: partner,
                        message: WireMessage::Phase {
                            version: t,
                            phase: 0,
                            payload: worker.state.w_prime.clone(),
                        },
                    });
                    worker.wait = Wait::Pair(t);
                }
            }
        }
        ship(sim, rank, out)?;
        self.poll(sim, rank)
    }

    fn on_message(&mut self, sim: &mut Simulator, rank: Rank, from: Rank, body: &[u8]) -> Result<(), OptimError> {
        let message = WireMessage::decode(body).map_err(CollectiveError::from)?;
        let mut out = Vec::new();
        let worker = &mut self.workers[rank];
        match (self.cfg.algorithm, message) {
            (Algorithm::Wagma | Algorithm::LocalSgd | Algorithm::Allreduce, message) => {
                endpoint(worker)?.on_message(from, message, &mut out)?;
            }
            (
                Algorithm::Dpsgd,
                WireMessage::Phase {
                    version,
                    phase: 0,
                    payload,
                },
            ) => {
                if worker.inbox.insert((version, from), payload).is_some() {
                    return Err(protocol(format!("rank {rank}: duplicate model from {from} for iteration {version}")));
                }
            }
            (
                Algorithm::Adpsgd,
                WireMessage::Phase {
                    version,
                    phase: 0,
                    payload,
                },
            ) => {
                // Average with whatever replica is current, mid-iteration or not.
                let current = match worker.wait {
                    Wait::Pair(_) => &mut worker.state.w_prime,
                    _ => &mut worker.state.w,
                };
                let avg: Vec<f64> = current.iter().zip(&payload).map(|(a, b)| (a + b) * 0.5).collect();
                current.clone_from(&avg);
                out.push(Outgoing {
                    to: from,
                    message: WireMessage::Phase {
                        version,
                        phase: 1,
                        payload: avg,
                    },
                });
            }
            (
                Algorithm::Adpsgd,
                WireMessage::Phase {
                    version,
                    phase: 1,
                    payload,
                },
            ) => {
                if worker.wait != Wait::Pair(version) {
                    return Err(protocol(format!(
                        "rank {rank}: unexpected averaging reply for iteration {version} from {from}"
                    )));
                }
                self.finish_iteration(sim, rank, payload, 0)?;
            }
            (algorithm, message) => {
                return Err(protocol(format!(
                    "rank {rank}: {} cannot handle {message:?} from {from}",
                    algorithm.name()
                )));
            }
        }
        ship(sim, rank, out)?;
        self.poll(sim, rank)
    }

    fn poll(&mut self, sim: &mut Simulator, rank: Rank) -> Result<(), OptimError> {
        let cfg = self.cfg;
        let worker = &mut self.workers[rank];
        match worker.wait {
            Wait::Group(t) => {
                let done = match worker.stash.take() {
                    Some(done) => Some(done),
                    None => endpoint(worker)?.take_completion(t),
                };
                if let Some(done) = done {
                    if let Some(tau) = cfg.tau {
                        if done.own_stamp <= t as i64 - tau as i64 {
                            return Err(OptimError::StalenessViolation {
                                rank,
                                version: t,
                                stamp: done.own_stamp,
                                tau,
                            });
                        }
                    }
                    let staleness = (t as i64 - done.own_stamp) as u64;
                    let next = group_average(&done.sum, &worker.state.w_prime, cfg.group_size, done.participated_timely);
                    worker.state.q = t + 1;
                    self.finish_iteration(sim, rank, next, staleness)?;
                }
            }
            Wait::Sync(t) => {
                if let Some(done) = endpoint(worker)?.take_completion(t) {
                    if !done.participated_timely {
                        return Err(protocol(format!("rank {rank}: synchronization {t} used a stale buffer")));
                    }
                    let p = cfg.processes as f64;
                    let next = if cfg.algorithm == Algorithm::Allreduce {
                        let g: Vec<f64> = done.sum.iter().map(|x| x / p).collect();
                        let eta = cfg.learning_rate.at(t, cfg.processes, cfg.iterations);
                        let delta = worker.state.update(&g, eta, cfg.update_rule);
                        worker.state.apply(&delta);
                        worker.state.w_prime.clone()
                    } else {
                        done.sum.iter().map(|x| x / p).collect()
                    };
                    worker.state.q = t + 1;
                    worker.state.r = t + 1;
                    self.finish_iteration(sim, rank, next, 0)?;
                }
            }
            Wait::Ring(t) => {
                let neighbors = ring_neighbors(rank, cfg.processes);
                if neighbors.iter().all(|n| worker.inbox.contains_key(&(t, *n))) {
                    let p = cfg.processes;
                    let mut order = vec![(rank + p - 1) % p, rank, (rank + 1) % p];
                    order.dedup();
                    if order.len() == 3 && order[0] == order[2] {
                        order.pop();
                    }
                    let mut sum = vec![0.0; worker.state.w.len()];
                    for &member in &order {
                        let model = if member == rank {
                            worker.state.w_prime.clone()
                        } else {
                            worker.inbox.remove(&(t, member)).expect("checked above")
                        };
                        for (s, x) in sum.iter_mut().zip(&model) {
                            *s += x;
                        }
                    }
                    let n = order.len() as f64;
                    sum.iter_mut().for_each(|s| *s /= n);
                    worker.state.q = t + 1;
                    self.finish_iteration(sim, rank, sum, 0)?;
                }
            }
            Wait::Computing | Wait::Pair(_) | Wait::Finished => {}
        }
        Ok(())
    }

    fn finish_iteration(&mut self, sim: &mut Simulator, rank: Rank, next: Vec<f64>, staleness: u64) -> Result<(), OptimError> {
        let p = self.cfg.processes;
        let worker = &mut self.workers[rank];
        let t = worker.state.iter;
        worker.state.w = next;
        worker.state.iter = t + 1;
        if matches!(self.cfg.algorithm, Algorithm::Wagma | Algorithm::LocalSgd) {
            worker.state.check_interaction_window(self.cfg.tau)?;
        }
        let slot = self.slots.entry(t).or_insert_with(|| Slot {
            replicas: vec![None; p],
            filled: 0,
            staleness: 0,
        });
        if slot.replicas[rank].replace(worker.state.w.clone()).is_some() {
            return Err(protocol(format!("rank {rank} finished iteration {t} twice")));
        }
        slot.filled += 1;
        slot.staleness = slot.staleness.max(staleness);
        self.start_iteration(sim, rank)
    }

    /// Emits records for every iteration all workers have finished.
    fn flush(&mut self, sim: &Simulator) -> Result<(), OptimError> {
        let p = self.cfg.processes;
        loop {
            let t = self.records.len() as u64;
            if !self.slots.get(&t).is_some_and(|s| s.filled == p) {
                return Ok(());
            }
            let slot = self.slots.remove(&t).expect("present");
            let replicas: Vec<Vec<f64>> = slot.replicas.into_iter().map(|r| r.expect("filled")).collect();
            let synced = match self.cfg.algorithm {
                Algorithm::Allreduce => true,
                Algorithm::Wagma | Algorithm::LocalSgd => self.cfg.is_sync(t),
                Algorithm::Dpsgd | Algorithm::Adpsgd => false,
            };
            if synced && replicas.iter().any(|r| bits(r) != bits(&replicas[0])) {
                return Err(OptimError::SyncMismatch { iteration: t });
            }
            let diag = compute_diagnostics(&replicas, self.problem);
            if !diag.loss_mu.is_finite() {
                return Err(OptimError::Divergence { iteration: t });
            }
            let traffic = sim.traffic();
            let record = MetricsRecord {
                iteration: t,
                sim_time_ms: sim.now().as_millis(),
                loss_mu: diag.loss_mu,
                grad_norm_sq_mu: diag.grad_norm_sq_mu,
                gamma: diag.gamma,
                max_staleness: slot.staleness,
                msgs_total: traffic.messages,
                bytes_total: traffic.bytes,
            };
            (self.observer)(&record, &replicas);
            self.max_gamma = self.max_gamma.max(diag.gamma);
            self.max_staleness = self.max_staleness.max(slot.staleness);
            self.records.push(record);
            self.last_replicas = replicas;
        }
    }
}

fn endpoint(worker: &mut Worker) -> Result<&mut GroupEndpoint, OptimError> {
    worker
        .endpoint
        .as_mut()
        .ok_or_else(|| protocol(format!("rank {} has no collective endpoint", worker.state.rank)))
}

fn ship(sim: &mut Simulator, from: Rank, out: Vec<Outgoing>) -> Result<(), OptimError> {
    for msg in out {
        sim.send(from, msg.to, msg.message.encode())?;
    }
    Ok(())
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}
