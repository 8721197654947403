//! Stand-alone driver that runs the collective by itself over the simulator,
//! with randomized compute times and link latencies.
//!
//! Every buffer is self-describing: the first `P` words hold a one-hot
//! `stamp + 2` at the owner's index, the remaining words hold pseudo-random
//! doubles derived from `(owner, stamp)`. A finished accumulator therefore
//! tells exactly which buffers it summed, and [`ScenarioOutcome::check_sums`]
//! can recompute the expected sum independently of the reduction order.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::endpoint::{Completion, EndpointConfig, GroupEndpoint, GroupSelection, InstanceKind, JoinOutcome, Outgoing};
use super::wire::WireMessage;
use super::CollectiveError;
use crate::netsim::{EventPayload, LinkModel, SimError, SimTime, Simulator};
use crate::topology::{compute_groups, GroupingParams, MaskRule, Rank};
use crate::util::mix_seed;

/// Test hook: flip one bit of the first payload word of every exchange
/// message `from` sends for `version`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadCorruption {
    pub version: u64,
    pub from: Rank,
    pub bit: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub processes: usize,
    pub group_size: usize,
    pub versions: u64,
    pub sync_period: Option<u64>,
    pub wait_avoiding: bool,
    pub link: LinkModel,
    pub compute_min: SimTime,
    pub compute_max: SimTime,
    /// Ranks whose compute takes `slow_compute` instead of the random draw.
    pub slow_ranks: Vec<Rank>,
    pub slow_compute: SimTime,
    pub float_words: usize,
    pub seed: u64,
    pub corruption: Option<PayloadCorruption>,
}

impl ScenarioConfig {
    pub fn new(processes: usize, group_size: usize, versions: u64, seed: u64) -> Self {
        ScenarioConfig {
            processes,
            group_size,
            versions,
            sync_period: None,
            wait_avoiding: true,
            link: LinkModel::default(),
            compute_min: SimTime::from_nanos(1_000_000),
            compute_max: SimTime::from_nanos(20_000_000),
            slow_ranks: Vec::new(),
            slow_compute: SimTime::ZERO,
            float_words: 4,
            seed,
            corruption: None,
        }
    }

    /// A randomized schedule over `processes` ranks: random group size,
    /// version count, optional sync period, compute spread, link jitter,
    /// blocking or wait-avoiding mode, and up to two very slow ranks.
    pub fn randomized(processes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5ce));
        let log_p = processes.trailing_zeros();
        let group_size = 1 << rng.random_range(0..=log_p);
        let mut cfg = ScenarioConfig::new(processes, group_size, rng.random_range(4..=16), seed);
        if rng.random_bool(0.5) {
            cfg.sync_period = Some(rng.random_range(2..=6));
        }
        cfg.wait_avoiding = rng.random_bool(0.8);
        cfg.link = LinkModel {
            latency: SimTime::from_nanos(rng.random_range(100_000..=2_000_000)),
            jitter: SimTime::from_nanos(rng.random_range(0..=3_000_000)),
        };
        cfg.compute_min = SimTime::from_nanos(rng.random_range(0..=2_000_000));
        cfg.compute_max = SimTime::from_nanos(cfg.compute_min.as_nanos() + rng.random_range(0..=30_000_000));
        for _ in 0..rng.random_range(0..=2) {
            cfg.slow_ranks.push(rng.random_range(0..processes));
        }
        cfg.slow_compute = SimTime::from_nanos(rng.random_range(20_000_000..=200_000_000));
        cfg
    }

    fn endpoint_config(&self) -> EndpointConfig {
        EndpointConfig {
            processes: self.processes,
            group_size: self.group_size,
            wait_avoiding: self.wait_avoiding,
            selection: GroupSelection::Butterfly(MaskRule::Rotating),
            sync_period: self.sync_period,
        }
    }

    /// The buffer `owner` publishes for iteration `stamp`.
    pub fn buffer(&self, owner: Rank, stamp: i64) -> Vec<f64> {
        let mut words = vec![0.0; self.processes + self.float_words];
        words[owner] = (stamp + 2) as f64;
        for i in 0..self.float_words {
            words[self.processes + i] = self.float_word(owner, stamp, i);
        }
        words
    }

    fn float_word(&self, owner: Rank, stamp: i64, index: usize) -> f64 {
        let s = mix_seed(mix_seed(self.seed ^ 0xf1, owner as u64), ((stamp + 1) as u64) << 16 | index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        rng.random_range(-1e3..1e3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRecord {
    pub rank: Rank,
    pub version: u64,
    pub join_time: SimTime,
    pub completed_time: SimTime,
    pub originated: bool,
    pub completion: Completion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutcome {
    pub config: ScenarioConfig,
    pub records: Vec<ScenarioRecord>,
    pub started: Vec<Vec<u64>>,
    pub activations_per_version: BTreeMap<u64, u64>,
    pub originators_per_version: BTreeMap<u64, u64>,
    pub data_activations: u64,
    pub final_time: SimTime,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
}

struct Proc {
    waiting: Option<(u64, SimTime)>,
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioOutcome, ScenarioError> {
    let p = cfg.processes;
    let ecfg = cfg.endpoint_config();
    let mut endpoints = (0..p)
        .map(|r| GroupEndpoint::new(r, ecfg, cfg.buffer(r, -1)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut procs: Vec<Proc> = (0..p).map(|_| Proc { waiting: None }).collect();
    let mut sim = Simulator::new(p, cfg.link, cfg.seed);
    let mut records = Vec::new();
    let mut activations: BTreeMap<u64, u64> = BTreeMap::new();

    let compute = |rank: Rank, version: u64| -> SimTime {
        if cfg.slow_ranks.contains(&rank) {
            return cfg.slow_compute;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed, rank as u64), version));
        SimTime::from_nanos(rng.random_range(cfg.compute_min.as_nanos()..=cfg.compute_max.as_nanos()))
    };
    for rank in 0..p {
        if cfg.versions > 0 {
            sim.schedule_after(compute(rank, 0), rank, EventPayload::ComputeDone { iteration: 0 })?;
        }
    }

    let ship = |sim: &mut Simulator, from: Rank, out: Vec<Outgoing>, activations: &mut BTreeMap<u64, u64>| -> Result<(), SimError> {
        for msg in out {
            if let WireMessage::Activate { version, .. } = msg.message {
                *activations.entry(version).or_default() += 1;
            }
            let mut bytes = msg.message.encode();
            if let (Some(c), WireMessage::Phase { version, .. }) = (cfg.corruption, &msg.message) {
                if c.from == from && c.version == *version {
                    let word = super::wire::HEADER_LEN;
                    let byte = word + (c.bit / 8) as usize;
                    bytes[byte] ^= 1 << (c.bit % 8);
                }
            }
            sim.send(from, msg.to, bytes)?;
        }
        Ok(())
    };

    let final_time = sim.run_until_idle::<ScenarioError, _>(|sim, event| {
        let rank = event.target;
        let mut out = Vec::new();
        match event.payload {
            EventPayload::ComputeDone { iteration } => {
                let fresh = cfg.buffer(rank, iteration as i64);
                let ep = &mut endpoints[rank];
                if ecfg.is_sync(iteration) {
                    ep.sync_join(iteration, fresh, &mut out)?;
                    procs[rank].waiting = Some((iteration, sim.now()));
                } else {
                    match ep.join_or_check(iteration, fresh, &mut out)? {
                        JoinOutcome::AlreadyDone(completion) => {
                            records.push(ScenarioRecord {
                                rank,
                                version: iteration,
                                join_time: sim.now(),
                                completed_time: sim.now(),
                                originated: false,
                                completion,
                            });
                            if iteration + 1 < cfg.versions {
                                sim.schedule_after(
                                    compute(rank, iteration + 1),
                                    rank,
                                    EventPayload::ComputeDone { iteration: iteration + 1 },
                                )?;
                            }
                        }
                        JoinOutcome::Active => procs[rank].waiting = Some((iteration, sim.now())),
                    }
                }
            }
            EventPayload::MessageArrival { from, body, .. } => {
                let message = WireMessage::decode(&body).map_err(CollectiveError::from)?;
                endpoints[rank].on_message(from, message, &mut out)?;
            }
            EventPayload::Timer { .. } => {}
        }
        ship(sim, rank, out, &mut activations)?;
        if let Some((version, joined)) = procs[rank].waiting {
            if let Some(completion) = endpoints[rank].take_completion(version) {
                procs[rank].waiting = None;
                records.push(ScenarioRecord {
                    rank,
                    version,
                    join_time: joined,
                    completed_time: sim.now(),
                    originated: endpoints[rank].stats().originated.contains(&version),
                    completion,
                });
                if version + 1 < cfg.versions {
                    sim.schedule_after(compute(rank, version + 1), rank, EventPayload::ComputeDone { iteration: version + 1 })?;
                }
            }
        }
        Ok(())
    })?;

    let mut originators: BTreeMap<u64, u64> = BTreeMap::new();
    for ep in &endpoints {
        for &v in &ep.stats().originated {
            *originators.entry(v).or_default() += 1;
        }
    }
    Ok(ScenarioOutcome {
        config: cfg.clone(),
        records,
        started: endpoints.iter().map(|e| e.stats().started.clone()).collect(),
        activations_per_version: activations,
        originators_per_version: originators,
        data_activations: endpoints.iter().map(|e| e.stats().data_activations).sum(),
        final_time,
    })
}

impl ScenarioOutcome {
    /// Every process started every version exactly once, in order.
    pub fn check_exactly_once(&self) -> Result<(), String> {
        let expected: Vec<u64> = (0..self.config.versions).collect();
        for (rank, started) in self.started.iter().enumerate() {
            if started != &expected {
                return Err(format!("rank {rank} started versions {started:?}"));
            }
        }
        let mut seen = vec![0u32; self.config.processes * self.config.versions as usize];
        for r in &self.records {
            seen[r.rank * self.config.versions as usize + r.version as usize] += 1;
        }
        if let Some(i) = seen.iter().position(|&n| n != 1) {
            return Err(format!(
                "rank {} consumed version {} {} times",
                i / self.config.versions as usize,
                i % self.config.versions as usize,
                seen[i]
            ));
        }
        Ok(())
    }

    /// Activation traffic never exceeds `P - 1` messages per originating root.
    pub fn check_activation_cost(&self) -> Result<(), String> {
        let per_tree = self.config.processes as u64 - 1;
        for (&version, &sent) in &self.activations_per_version {
            let roots = self.originators_per_version.get(&version).copied().unwrap_or(0);
            if sent > roots * per_tree {
                return Err(format!("version {version}: {sent} activations for {roots} roots"));
            }
        }
        Ok(())
    }

    /// Each accumulator is the sum of exactly one buffer per group member,
    /// each within the staleness window, integer part exact and float part
    /// within `rel_tol`. Returns the number of all-timely instances checked.
    pub fn check_sums(&self, rel_tol: f64) -> Result<usize, String> {
        let cfg = &self.config;
        let p = cfg.processes;
        let mut all_timely = 0;
        for rec in &self.records {
            let sum = &rec.completion.sum;
            let members: Vec<Rank> = match rec.completion.kind {
                InstanceKind::Sync => (0..p).collect(),
                InstanceKind::Group => {
                    let params = GroupingParams::new(p, cfg.group_size, rec.version).map_err(|e| e.to_string())?;
                    let part = compute_groups(params);
                    let g = part.group_of(rec.rank).ok_or("rank without group")?;
                    part.groups[g].clone()
                }
            };
            let mut expected_floats = vec![0.0f64; cfg.float_words];
            let mut timely = true;
            for m in 0..p {
                let marker = sum[m];
                let is_member = members.contains(&m);
                if !is_member {
                    if marker != 0.0 {
                        return Err(format!(
                            "rank {} version {}: non-member {m} contributed",
                            rec.rank, rec.version
                        ));
                    }
                    continue;
                }
                if marker.fract() != 0.0 || marker < 1.0 {
                    return Err(format!(
                        "rank {} version {}: member {m} contributed {marker} (missing or duplicated)",
                        rec.rank, rec.version
                    ));
                }
                let stamp = marker as i64 - 2;
                if stamp > rec.version as i64 {
                    return Err(format!(
                        "rank {} version {}: member {m} contributed a future buffer {stamp}",
                        rec.rank, rec.version
                    ));
                }
                if let Some(tau) = cfg.sync_period {
                    if rec.version as i64 - stamp > tau as i64 - 1 {
                        return Err(format!(
                            "rank {} version {}: member {m} buffer stamp {stamp} exceeds staleness bound",
                            rec.rank, rec.version
                        ));
                    }
                }
                timely &= stamp == rec.version as i64;
                for (i, e) in expected_floats.iter_mut().enumerate() {
                    *e += cfg.float_word(m, stamp, i);
                }
            }
            for (i, e) in expected_floats.iter().enumerate() {
                let got = sum[p + i];
                let scale = e.abs().max(1.0);
                if (got - e).abs() > rel_tol * scale {
                    return Err(format!(
                        "rank {} version {}: word {i} is {got}, expected {e}",
                        rec.rank, rec.version
                    ));
                }
            }
            if timely {
                all_timely += 1;
            }
        }
        Ok(all_timely)
    }

    /// Members of the same group instance hold bit-identical results.
    pub fn check_group_agreement(&self) -> Result<(), String> {
        let mut by_group: BTreeMap<(u64, Vec<Rank>), Vec<u64>> = BTreeMap::new();
        let p = self.config.processes;
        for rec in &self.records {
            // group identity: the set of contributing members
            let members: Vec<Rank> = (0..p).filter(|&m| rec.completion.sum[m] != 0.0).collect();
            let bits: Vec<u64> = rec.completion.sum.iter().map(|x| x.to_bits()).collect();
            match by_group.get(&(rec.version, members.clone())) {
                Some(prev) if prev != &bits => {
                    return Err(format!("version {}: group members disagree", rec.version));
                }
                Some(_) => {}
                None => {
                    by_group.insert((rec.version, members), bits);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_scenario_is_correct() {
        let cfg = ScenarioConfig::new(8, 4, 12, 1);
        let out = run_scenario(&cfg).unwrap();
        out.check_exactly_once().unwrap();
        out.check_activation_cost().unwrap();
        out.check_sums(1e-12).unwrap();
        out.check_group_agreement().unwrap();
    }

    #[test]
    fn corrupted_payload_is_detected() {
        let mut cfg = ScenarioConfig::new(4, 2, 4, 2);
        cfg.corruption = Some(PayloadCorruption {
            version: 1,
            from: 0,
            bit: 62,
        });
        let out = run_scenario(&cfg).unwrap();
        assert!(out.check_sums(1e-12).is_err());
    }
}
