//! Round-based simulation of data-parallel particle tracing.
//!
//! A fixed set of processes advances particles through a block-decomposed
//! vector field. Each round every process drains its pending particle queues,
//! records per-block trajectory statistics, exchanges boundary particles, and
//! (depending on the strategy) rebalances block ownership before the next
//! round starts. Time is modeled with per-process busy/communication clocks
//! joined by a barrier at the end of every round.

pub mod config;
pub mod donation;

pub use config::{
    AgentConfig, DecompositionConfig, EstimatorConfig, FieldConfig, NetworkConfig, ProcessesConfig,
    RunConfig, SeedingConfig, SimConfig, Strategy, TracingConfig,
};
pub use donation::{DonationDecision, DonationRequest, RejectReason};

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::advection::{trace_in_block, Particle, ParticleStatus};
use crate::agent::{self, BoundaryFlows, DecisionContext, PolicyParams};
use crate::comm::{CommCostModel, CommPriors, TransferKind};
use crate::domain_decomp::{
    decompose, friend_set, round_robin_assign, BlockAssignment, BlockId, Decomposition, Rank,
};
use crate::error::{Error, Result};
use crate::metrics::{
    ActivityInterval, ActivityKind, DonationRecord, MetricsReport, PolicySample, RankClocks,
};
use crate::space::Point3;
use crate::vector_field::FieldSpec;
use crate::workload::{
    deserialize_tree, serialize_tree, AdvectionRateTracker, IncomingCounts, TrajectoriesTree,
    TrajectoryPath,
};

/// RNG stream used for seed-particle placement.
const SEED_STREAM: u64 = 0;
/// RNG stream used for network-latency noise.
const NETWORK_STREAM: u64 = 1;
/// Per-process RNG streams start here (stream = base + rank).
const RANK_STREAM_BASE: u64 = 10;
/// Number of release waves the seed set is split into.
const WAVE_COUNT: usize = 10;

/// Everything one simulated process owns: resident block statistics, pending
/// particle queues, its learned policy, cost models, and its clocks.
struct ProcessState {
    /// Trajectory statistics for every block this process currently owns.
    trees: BTreeMap<BlockId, TrajectoriesTree>,
    /// Particles waiting to be traced, grouped by the block they are in.
    pending: BTreeMap<BlockId, Vec<Particle>>,
    /// Observed integration throughput (seconds per step).
    tracker: AdvectionRateTracker,
    /// Locally observed transfer events and fitted transfer rates.
    comm_model: CommCostModel,
    /// Donation policy parameters (unused by non-learning strategies).
    params: PolicyParams,
    /// Private RNG stream for block and action sampling.
    rng: ChaCha8Rng,
    /// Cumulative clocks across all finished rounds.
    busy: f64,
    comm: f64,
    idle: f64,
    /// Clocks for the round currently being simulated.
    round_busy: f64,
    round_comm: f64,
}

impl ProcessState {
    fn new(cfg: &SimConfig, rank: Rank) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
        rng.set_stream(RANK_STREAM_BASE + rank as u64);
        let priors = CommPriors {
            d_block: cfg.network.prior_d_block,
            d_particle: cfg.network.prior_d_particle,
            latency: cfg.network.prior_latency,
        };
        Self {
            trees: BTreeMap::new(),
            pending: BTreeMap::new(),
            tracker: AdvectionRateTracker::default(),
            comm_model: CommCostModel::new(priors),
            params: PolicyParams::new(cfg.agent.alpha),
            rng,
            busy: 0.0,
            comm: 0.0,
            idle: 0.0,
            round_busy: 0.0,
            round_comm: 0.0,
        }
    }

    fn pending_count(&self) -> u64 {
        self.pending.values().map(|v| v.len() as u64).sum()
    }
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    field: FieldSpec,
    decomp: Decomposition,
    assignment: BlockAssignment,
    states: Vec<ProcessState>,
    n_p: usize,
    order: usize,
    h: f64,
    capacity: usize,
    net_rng: ChaCha8Rng,
    /// Release waves not yet injected; `schedule[next_wave]` goes out next.
    schedule: Vec<Vec<(BlockId, Vec<Particle>)>>,
    next_wave: usize,
    /// Per-block workload predictions made at the end of the previous round.
    prev_estimates: BTreeMap<BlockId, f64>,
    /// Boundary crossings observed this round (traffic expected next round).
    flows: BoundaryFlows,
    /// Arrival counts per destination block, keyed by origin path.
    incoming: IncomingCounts,
    round: u32,
    makespan: f64,
    intervals: Vec<ActivityInterval>,
    donations: Vec<DonationRecord>,
    policy_trace: Vec<PolicySample>,
    estimation_errors: Vec<(u32, f64)>,
    err_num: f64,
    err_den: f64,
    seeded: u64,
    terminated_out_of_domain: u64,
    terminated_max_steps: u64,
    terminated_stopped: u64,
    total_steps: u64,
}

/// Runs the configured scenario and returns its collected metrics.
pub fn run(cfg: &SimConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let field = cfg.build_field()?;
    let domain = field.domain();
    if cfg.decomposition.blocks_per_axis.len() != domain.dim {
        return Err(Error::InvalidConfig(format!(
            "blocks_per_axis has {} entries but the field is {}-dimensional",
            cfg.decomposition.blocks_per_axis.len(),
            domain.dim
        )));
    }
    let time_range = if cfg.decomposition.time_blocks > 1 {
        match field.time_range() {
            Some(tr) => Some(tr),
            None => {
                return Err(Error::InvalidConfig(
                    "time_blocks > 1 requires a time-bounded field".into(),
                ))
            }
        }
    } else {
        None
    };
    let decomp = decompose(
        domain,
        &cfg.decomposition.blocks_per_axis,
        cfg.decomposition.time_blocks,
        time_range,
        cfg.decomposition.ghost_width,
    )?;
    let assignment = round_robin_assign(decomp.n_blocks(), cfg.processes.count)?;
    let n_p = cfg.processes.count;
    let capacity = cfg.memory_capacity(decomp.n_blocks());
    let max_initial = (0..n_p).map(|r| assignment.count_of(r)).max().unwrap_or(0);
    if capacity < max_initial {
        return Err(Error::InvalidConfig(format!(
            "memory capacity {capacity} is below the largest initial share {max_initial}"
        )));
    }

    let mut states: Vec<ProcessState> = (0..n_p).map(|r| ProcessState::new(cfg, r)).collect();
    for block in 0..decomp.n_blocks() {
        let id = BlockId(block);
        states[assignment.owner_of(id)]
            .trees
            .insert(id, TrajectoriesTree::new(id, cfg.estimator.order));
    }

    let seeds = generate_seeds(cfg, &field, &decomp)?;
    let seeded = seeds.len() as u64;
    let schedule = build_schedule(seeds);

    let mut net_rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    net_rng.set_stream(NETWORK_STREAM);

    let mut sim = Sim {
        cfg,
        h: cfg.step_size(&decomp),
        order: cfg.estimator.order,
        field,
        decomp,
        assignment,
        states,
        n_p,
        capacity,
        net_rng,
        schedule,
        next_wave: 0,
        prev_estimates: BTreeMap::new(),
        flows: BoundaryFlows::default(),
        incoming: IncomingCounts::new(),
        round: 0,
        makespan: 0.0,
        intervals: Vec::new(),
        donations: Vec::new(),
        policy_trace: Vec::new(),
        estimation_errors: Vec::new(),
        err_num: 0.0,
        err_den: 0.0,
        seeded,
        terminated_out_of_domain: 0,
        terminated_max_steps: 0,
        terminated_stopped: 0,
        total_steps: 0,
    };

    let mut round_cap_exceeded = false;
    loop {
        let has_pending = sim.states.iter().any(|s| s.pending_count() > 0);
        let has_scheduled = sim.next_wave < sim.schedule.len();
        if !has_pending && !has_scheduled {
            break;
        }
        if sim.round >= cfg.run.round_cap {
            round_cap_exceeded = true;
            break;
        }
        sim.run_round()?;
    }

    let clocks: Vec<RankClocks> = sim
        .states
        .iter()
        .enumerate()
        .map(|(rank, s)| RankClocks {
            rank,
            busy: s.busy,
            comm: s.comm,
            idle: s.idle,
        })
        .collect();
    let busy: Vec<f64> = clocks.iter().map(|c| c.busy).collect();
    let imbalance = crate::metrics::imbalance(&busy).ok();
    let overall = (sim.err_den > 0.0).then(|| sim.err_num / sim.err_den);

    Ok(MetricsReport {
        strategy: cfg.run.strategy,
        seed: cfg.run.seed,
        rounds: sim.round,
        round_cap_exceeded,
        makespan: sim.makespan,
        clocks,
        imbalance,
        estimation_errors: sim.estimation_errors,
        overall_estimation_error: overall,
        donations: sim.donations,
        policy_trace: sim.policy_trace,
        intervals: sim.intervals,
        seeded: sim.seeded,
        terminated_out_of_domain: sim.terminated_out_of_domain,
        terminated_max_steps: sim.terminated_max_steps,
        terminated_stopped: sim.terminated_stopped,
        total_steps: sim.total_steps,
    })
}

/// Runs the same scenario with a different rebalancing strategy.
pub fn run_baseline(cfg: &SimConfig, strategy: Strategy) -> Result<MetricsReport> {
    let mut alt = cfg.clone();
    alt.run.strategy = strategy;
    run(&alt)
}

/// Places seed particles according to the configured seeding mode.
fn generate_seeds(
    cfg: &SimConfig,
    field: &FieldSpec,
    decomp: &Decomposition,
) -> Result<Vec<Particle>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    rng.set_stream(SEED_STREAM);
    let domain = field.domain();
    let t0 = field.time_range().map_or(0.0, |(start, _)| start);

    let mut positions: Vec<Point3> = Vec::new();
    match &cfg.seeding {
        SeedingConfig::Uniform { count } => {
            for _ in 0..*count {
                let mut p = [0.0; 3];
                for (a, slot) in p.iter_mut().enumerate().take(domain.dim) {
                    *slot = rng.gen_range(domain.min[a]..domain.max[a]);
                }
                positions.push(p);
            }
        }
        SeedingConfig::Region { count, min, max } => {
            if min.len() != domain.dim {
                return Err(Error::InvalidConfig(format!(
                    "seeding region is {}-dimensional but the field is {}-dimensional",
                    min.len(),
                    domain.dim
                )));
            }
            for a in 0..domain.dim {
                if min[a] < domain.min[a] || max[a] > domain.max[a] {
                    return Err(Error::InvalidConfig(format!(
                        "seeding region axis {a} [{}, {}] leaves the field domain [{}, {}]",
                        min[a], max[a], domain.min[a], domain.max[a]
                    )));
                }
            }
            for _ in 0..*count {
                let mut p = [0.0; 3];
                for (a, slot) in p.iter_mut().enumerate().take(domain.dim) {
                    *slot = rng.gen_range(min[a]..max[a]);
                }
                positions.push(p);
            }
        }
        SeedingConfig::Lattice { points_per_axis } => {
            if points_per_axis.len() != domain.dim {
                return Err(Error::InvalidConfig(format!(
                    "lattice has {} axes but the field is {}-dimensional",
                    points_per_axis.len(),
                    domain.dim
                )));
            }
            let coord = |a: usize, i: usize| {
                let n = points_per_axis[a];
                if n == 1 {
                    0.5 * (domain.min[a] + domain.max[a])
                } else {
                    domain.min[a] + (domain.max[a] - domain.min[a]) * i as f64 / (n - 1) as f64
                }
            };
            let nx = points_per_axis[0];
            let ny = points_per_axis.get(1).copied().unwrap_or(1);
            let nz = points_per_axis.get(2).copied().unwrap_or(1);
            for iz in 0..nz {
                for iy in 0..ny {
                    for ix in 0..nx {
                        let mut p = [0.0; 3];
                        p[0] = coord(0, ix);
                        if domain.dim > 1 {
                            p[1] = coord(1, iy);
                        }
                        if domain.dim > 2 {
                            p[2] = coord(2, iz);
                        }
                        positions.push(p);
                    }
                }
            }
        }
    }

    positions
        .into_iter()
        .enumerate()
        .map(|(i, pos)| {
            let block = decomp.locate_block(pos, t0)?;
            Ok(Particle::new(i as u64, pos, t0, block))
        })
        .collect()
}

/// Splits the seed set into release waves: per seed block, wave `k` gets
/// `n / 10` particles plus one extra while `k < n % 10`. Trailing waves that
/// end up globally empty are dropped.
fn build_schedule(seeds: Vec<Particle>) -> Vec<Vec<(BlockId, Vec<Particle>)>> {
    let mut by_block: BTreeMap<BlockId, Vec<Particle>> = BTreeMap::new();
    for p in seeds {
        by_block.entry(p.seed_block).or_default().push(p);
    }
    let mut waves: Vec<BTreeMap<BlockId, Vec<Particle>>> = vec![BTreeMap::new(); WAVE_COUNT];
    for (block, list) in by_block {
        let n = list.len();
        let base = n / WAVE_COUNT;
        let rem = n % WAVE_COUNT;
        let mut it = list.into_iter();
        for (k, wave) in waves.iter_mut().enumerate() {
            let take = base + usize::from(k < rem);
            if take > 0 {
                wave.entry(block)
                    .or_default()
                    .extend(it.by_ref().take(take));
            }
        }
    }
    let mut out: Vec<Vec<(BlockId, Vec<Particle>)>> =
        waves.into_iter().map(|m| m.into_iter().collect()).collect();
    while out.last().is_some_and(|w| w.is_empty()) {
        out.pop();
    }
    out
}

impl Sim<'_> {
    fn run_round(&mut self) -> Result<()> {
        self.round += 1;

        // Release the next seed wave to the current owners of its blocks.
        if self.next_wave < self.schedule.len() {
            let wave = std::mem::take(&mut self.schedule[self.next_wave]);
            self.next_wave += 1;
            for (block, particles) in wave {
                let owner = self.assignment.owner_of(block);
                self.states[owner]
                    .pending
                    .entry(block)
                    .or_default()
                    .extend(particles);
            }
        }

        if self.cfg.run.strategy == Strategy::WorkRequesting {
            self.steal_phase();
        }

        // Trace every pending queue to termination or a block boundary.
        let mut actuals: BTreeMap<BlockId, f64> = BTreeMap::new();
        self.incoming = IncomingCounts::new();
        self.flows = BoundaryFlows::default();
        let mut outbox: Vec<(Rank, BlockId, Particle)> = Vec::new();
        for rank in 0..self.n_p {
            let pending = std::mem::take(&mut self.states[rank].pending);
            let sps = self.cfg.seconds_per_step(rank);
            for (block, particles) in pending {
                if particles.is_empty() {
                    continue;
                }
                // The path a particle arrived on is its tree key; capture it
                // before tracing appends the current block to its history.
                let paths: Vec<TrajectoryPath> =
                    particles.iter().map(|p| p.tree_path(self.order)).collect();
                let result = trace_in_block(
                    &self.field,
                    &self.decomp,
                    block,
                    particles,
                    self.h,
                    self.cfg.tracing.max_steps,
                    self.cfg.tracing.v_eps,
                    self.order,
                    sps,
                );
                self.states[rank].round_busy += result.wall_seconds_charged;
                self.states[rank]
                    .tracker
                    .record(result.steps, result.wall_seconds_charged);
                self.total_steps += result.steps;
                *actuals.entry(block).or_insert(0.0) += result.wall_seconds_charged;
                let owner = self.assignment.owner_of(block);
                for (traced, path) in result.particles.into_iter().zip(paths) {
                    let tree = self.states[owner]
                        .trees
                        .get_mut(&block)
                        .expect("owners hold a tree for every owned block");
                    tree.record_advection(&path, traced.steps_in_block);
                    match traced.exit_target {
                        Some(next) => {
                            let p = traced.particle;
                            self.incoming.add(next, p.tree_path(self.order), 1);
                            self.flows.add(block, next, 1);
                            outbox.push((rank, next, p));
                        }
                        None => match traced.particle.status {
                            ParticleStatus::OutOfDomain => self.terminated_out_of_domain += 1,
                            ParticleStatus::MaxSteps => self.terminated_max_steps += 1,
                            ParticleStatus::Stopped => self.terminated_stopped += 1,
                            ParticleStatus::Active => {
                                return Err(Error::InvariantViolation(
                                    "tracing returned an active particle without an exit".into(),
                                ))
                            }
                        },
                    }
                }
            }
        }

        // The wave released next round is a known future arrival; fold it in
        // so the estimates the rebalancer works with account for it.
        if self.next_wave < self.schedule.len() {
            for (block, particles) in &self.schedule[self.next_wave] {
                if !particles.is_empty() {
                    self.incoming
                        .add(*block, vec![*block; self.order], particles.len() as u64);
                }
            }
        }

        for state in &mut self.states {
            for tree in state.trees.values_mut() {
                tree.aggregate();
            }
        }

        // Score the predictions made at the end of the previous round.
        let den: f64 = actuals.values().sum();
        if den > 0.0 {
            let mut num = 0.0;
            for (&block, &est) in &self.prev_estimates {
                num += (est - actuals.get(&block).copied().unwrap_or(0.0)).abs();
            }
            for (&block, &actual) in &actuals {
                if !self.prev_estimates.contains_key(&block) {
                    num += actual;
                }
            }
            self.estimation_errors.push((self.round, num / den));
            // The first round has no recorded history to predict from, so the
            // aggregate score starts with the second round.
            if self.round >= 2 {
                self.err_num += num;
                self.err_den += den;
            }
        }

        // Predict next-round per-block workloads from the trees.
        let mut estimates: BTreeMap<BlockId, f64> = BTreeMap::new();
        let destinations: Vec<BlockId> = self.incoming.blocks().collect();
        for block in destinations {
            let owner = self.assignment.owner_of(block);
            let d_a = self.effective_da(owner);
            let counts = self
                .incoming
                .for_block(block)
                .expect("destination blocks listed by the index have counts");
            let est = self.states[owner].trees[&block].estimate(counts, d_a);
            if est > 0.0 {
                estimates.insert(block, est);
            }
        }

        for state in &mut self.states {
            state.comm_model.refit_all();
        }

        match self.cfg.run.strategy {
            Strategy::RlDonation => self.donation_phase(&mut estimates, false)?,
            Strategy::GreedyDonation => self.donation_phase(&mut estimates, true)?,
            Strategy::Static | Strategy::WorkRequesting => {}
        }
        for rank in 0..self.n_p {
            self.policy_trace.push(PolicySample {
                round: self.round,
                rank,
                theta: self.states[rank].params.theta,
            });
        }
        self.prev_estimates = estimates;

        // Forward boundary-crossing particles to the owners of their targets.
        let mut groups: BTreeMap<(Rank, Rank), Vec<(BlockId, Particle)>> = BTreeMap::new();
        for (from, next, p) in outbox {
            let to = self.assignment.owner_of(next);
            groups.entry((from, to)).or_default().push((next, p));
        }
        for ((from, to), items) in groups {
            if from != to {
                self.charge_transfer(false, items.len() as u64, from, to);
            }
            for (block, p) in items {
                self.states[to].pending.entry(block).or_default().push(p);
            }
        }

        // Barrier: the round lasts as long as its busiest process.
        let wall = self
            .states
            .iter()
            .map(|s| s.round_busy + s.round_comm)
            .fold(0.0_f64, f64::max);
        let t0 = self.makespan;
        for (rank, state) in self.states.iter_mut().enumerate() {
            let busy = state.round_busy;
            let comm = state.round_comm;
            let idle = ((wall - busy) - comm).max(0.0);
            state.busy += busy;
            state.comm += comm;
            state.idle += idle;
            state.round_busy = 0.0;
            state.round_comm = 0.0;
            let mut t = t0;
            for (kind, width) in [
                (ActivityKind::Compute, busy),
                (ActivityKind::Comm, comm),
                (ActivityKind::Idle, idle),
            ] {
                if width > 0.0 {
                    self.intervals.push(ActivityInterval {
                        rank,
                        kind,
                        t_start: t,
                        t_end: t + width,
                    });
                }
                t += width;
            }
        }
        self.makespan += wall;

        if self.cfg.run.validate {
            self.check_invariants()?;
        }
        Ok(())
    }

    /// Observed seconds-per-step for a rank, falling back to the configured
    /// tracer rate before the rank has integrated anything.
    fn effective_da(&self, rank: Rank) -> f64 {
        let da = self.states[rank].tracker.d_a();
        if da > 0.0 {
            da
        } else {
            self.cfg.seconds_per_step(rank)
        }
    }

    /// Charges one batched transfer to both endpoints' communication clocks
    /// and records the event in both endpoint cost models.
    fn charge_transfer(&mut self, block_entity: bool, count: u64, from: Rank, to: Rank) {
        if count == 0 || from == to {
            return;
        }
        let net = &self.cfg.network;
        let d = if block_entity {
            net.d_block
        } else {
            net.d_particle
        };
        let mut y = net.latency + d * count as f64;
        if net.noise_sigma > 0.0 {
            let eps: f64 = StandardNormal.sample(&mut self.net_rng);
            y *= 1.0 + net.noise_sigma * eps;
        }
        let y = y.max(0.0);
        let (send_kind, recv_kind) = if block_entity {
            (TransferKind::BlockSend, TransferKind::BlockRecv)
        } else {
            (TransferKind::ParticleSend, TransferKind::ParticleRecv)
        };
        self.states[from].round_comm += y;
        self.states[to].round_comm += y;
        self.states[from]
            .comm_model
            .record_event(send_kind, count, y)
            .expect("transfer observations are positive and finite");
        self.states[to]
            .comm_model
            .record_event(recv_kind, count, y)
            .expect("transfer observations are positive and finite");
    }

    /// Idle processes pull roughly half of a random friend's pending queue.
    /// Block ownership never changes; a thief working on a block it does not
    /// own pays a one-off load cost for fetching that block's data.
    fn steal_phase(&mut self) {
        let idle: Vec<Rank> = (0..self.n_p)
            .filter(|&r| self.states[r].pending_count() == 0)
            .collect();
        for thief in idle {
            let friends = friend_set(thief, self.n_p);
            if friends.is_empty() {
                continue;
            }
            let victim = friends[self.states[thief].rng.gen_range(0..friends.len())];
            let mut stolen: Vec<(BlockId, Vec<Particle>)> = Vec::new();
            {
                let victim_pending = &mut self.states[victim].pending;
                for (&block, list) in victim_pending.iter_mut() {
                    let keep = list.len() / 2;
                    if list.len() > keep {
                        stolen.push((block, list.split_off(keep)));
                    }
                }
                victim_pending.retain(|_, list| !list.is_empty());
            }
            let count: u64 = stolen.iter().map(|(_, l)| l.len() as u64).sum();
            if count == 0 {
                continue;
            }
            let missing = stolen
                .iter()
                .filter(|(block, _)| self.assignment.owner_of(*block) != thief)
                .count();
            self.states[thief].round_comm += missing as f64 * self.cfg.network.block_load_seconds;
            self.charge_transfer(false, count, victim, thief);
            for (block, list) in stolen {
                self.states[thief]
                    .pending
                    .entry(block)
                    .or_default()
                    .extend(list);
            }
        }
    }

    fn build_ctx(
        &self,
        donor: Rank,
        block: BlockId,
        workload: f64,
        workloads: &BTreeMap<Rank, f64>,
    ) -> DecisionContext {
        let mut friend_workloads: BTreeMap<Rank, f64> = friend_set(donor, self.n_p)
            .into_iter()
            .map(|f| (f, workloads[&f]))
            .collect();
        friend_workloads.insert(donor, workloads[&donor]);
        let neighbors = self.decomp.block_neighbors(block);
        let incoming_counts = self.flows.incoming_to(block, &neighbors);
        let neighbor_owners = neighbors
            .iter()
            .map(|&j| (j, self.assignment.owner_of(j)))
            .collect();
        DecisionContext {
            owner: donor,
            block,
            workload,
            friend_workloads,
            rates: self.states[donor].comm_model.rates(),
            incoming_counts,
            neighbor_owners,
        }
    }

    /// One rebalancing round: overloaded processes each offer one block to a
    /// friend, receivers accept or reject, accepted blocks migrate, and (for
    /// the learning strategy) every donor updates its policy from the reward.
    fn donation_phase(
        &mut self,
        estimates: &mut BTreeMap<BlockId, f64>,
        greedy: bool,
    ) -> Result<()> {
        let workloads: BTreeMap<Rank, f64> = (0..self.n_p)
            .map(|r| {
                let total = self
                    .assignment
                    .blocks_of(r)
                    .iter()
                    .map(|b| estimates.get(b).copied().unwrap_or(0.0))
                    .sum();
                (r, total)
            })
            .collect();
        let donors = donation::select_donors(&workloads);

        // Each donor samples one offer: a block, and a target process.
        type Offer = (
            Rank,
            BlockId,
            Rank,
            Option<(DecisionContext, BTreeMap<Rank, f64>)>,
        );
        let mut offers: Vec<Offer> = Vec::new();
        for &donor in &donors {
            let positive: Vec<BlockId> = self
                .assignment
                .blocks_of(donor)
                .into_iter()
                .filter(|b| estimates.get(b).copied().unwrap_or(0.0) > 0.0)
                .collect();
            if positive.is_empty() {
                continue;
            }
            let block = positive[self.states[donor].rng.gen_range(0..positive.len())];
            let workload = estimates[&block];
            if greedy {
                if let Some(target) = donation::greedy_target(donor, &workloads) {
                    offers.push((donor, block, target, None));
                }
                continue;
            }
            let ctx = self.build_ctx(donor, block, workload, &workloads);
            let probs = agent::policy(self.states[donor].params.theta, &ctx)?;
            if self.cfg.run.validate {
                let sum: f64 = probs.values().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::InvariantViolation(format!(
                        "action probabilities sum to {sum}, not 1"
                    )));
                }
            }
            let targets: Vec<Rank> = probs.keys().copied().collect();
            let weights: Vec<f64> = probs.values().copied().collect();
            let dist =
                WeightedIndex::new(&weights).expect("action probabilities are positive and finite");
            let target = targets[dist.sample(&mut self.states[donor].rng)];
            offers.push((donor, block, target, Some((ctx, probs))));
        }

        // Receivers answer every request with their post-offer workload and
        // an accept/reject decision per request.
        let mut per_receiver: BTreeMap<Rank, Vec<DonationRequest>> = BTreeMap::new();
        for (donor, block, target, _) in &offers {
            if target != donor {
                per_receiver
                    .entry(*target)
                    .or_default()
                    .push(DonationRequest {
                        donor: *donor,
                        block: *block,
                        workload: estimates[block],
                        donor_total: workloads[donor],
                    });
            }
        }
        let mut feedbacks: BTreeMap<Rank, f64> = BTreeMap::new();
        let mut decisions: BTreeMap<Rank, DonationDecision> = BTreeMap::new();
        for (&receiver, requests) in &per_receiver {
            feedbacks.insert(receiver, donation::feedback(workloads[&receiver], requests));
            let resident = self.assignment.count_of(receiver);
            for decision in
                donation::resolve_requests(workloads[&receiver], resident, self.capacity, requests)
            {
                decisions.insert(decision.request.donor, decision);
            }
        }

        // Donors learn from the receiver feedback, then accepted blocks move.
        let mut batches: BTreeMap<(Rank, Rank), u64> = BTreeMap::new();
        for (donor, block, target, policy_data) in offers {
            if target == donor {
                self.donations.push(DonationRecord {
                    round: self.round,
                    donor,
                    block,
                    target,
                    accepted: true,
                    reward: 0.0,
                });
                continue;
            }
            let decision = &decisions[&donor];
            let reward = if let Some((ctx, probs)) = policy_data {
                let reward = donation::donation_reward(&ctx, target, feedbacks[&target])?;
                let gradient = agent::log_policy_gradient(&ctx, target, &probs)?;
                agent::update_policy(&mut self.states[donor].params, gradient, reward);
                reward
            } else {
                0.0
            };
            self.donations.push(DonationRecord {
                round: self.round,
                donor,
                block,
                target,
                accepted: decision.accepted,
                reward,
            });
            if decision.accepted {
                let tree = self.states[donor]
                    .trees
                    .remove(&block)
                    .expect("donors hold a tree for every owned block");
                let bytes = serialize_tree(&tree);
                let restored = deserialize_tree(&bytes)?;
                self.states[target].trees.insert(block, restored);
                self.assignment.set_owner(block, target);
                *batches.entry((donor, target)).or_insert(0) += 1;
                // The new owner re-estimates the block with its own rate.
                let d_a = self.effective_da(target);
                let est = match self.incoming.for_block(block) {
                    Some(counts) => self.states[target].trees[&block].estimate(counts, d_a),
                    None => 0.0,
                };
                if est > 0.0 {
                    estimates.insert(block, est);
                } else {
                    estimates.remove(&block);
                }
            }
        }
        for ((from, to), count) in batches {
            self.charge_transfer(true, count, from, to);
        }
        Ok(())
    }

    fn check_invariants(&self) -> Result<()> {
        self.assignment.validate(self.n_p)?;
        for rank in 0..self.n_p {
            let owned = self.assignment.blocks_of(rank);
            if owned.len() > self.capacity {
                return Err(Error::InvariantViolation(format!(
                    "rank {rank} holds {} blocks, above the capacity {}",
                    owned.len(),
                    self.capacity
                )));
            }
            let state = &self.states[rank];
            let tree_blocks: Vec<BlockId> = state.trees.keys().copied().collect();
            if tree_blocks != owned {
                return Err(Error::InvariantViolation(format!(
                    "rank {rank} trees {tree_blocks:?} disagree with owned blocks {owned:?}"
                )));
            }
            for tree in state.trees.values() {
                tree.check_aggregates(1e-9)?;
            }
            if state
                .params
                .theta
                .iter()
                .any(|t| !t.is_finite() || *t < 0.0)
            {
                return Err(Error::InvariantViolation(format!(
                    "rank {rank} policy parameters {:?} left the valid range",
                    state.params.theta
                )));
            }
            let total = state.busy + state.comm + state.idle;
            if (total - self.makespan).abs() > 1e-9 * self.makespan.max(1.0) {
                return Err(Error::InvariantViolation(format!(
                    "rank {rank} clocks sum to {total}, expected the makespan {}",
                    self.makespan
                )));
            }
        }
        let pending: u64 = self.states.iter().map(|s| s.pending_count()).sum();
        let unreleased: u64 = self.schedule[self.next_wave.min(self.schedule.len())..]
            .iter()
            .flat_map(|w| w.iter().map(|(_, l)| l.len() as u64))
            .sum();
        let terminated =
            self.terminated_out_of_domain + self.terminated_max_steps + self.terminated_stopped;
        let accounted = pending + unreleased + terminated;
        if accounted != self.seeded {
            return Err(Error::InvariantViolation(format!(
                "{accounted} particles accounted for, {} were seeded",
                self.seeded
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gyre_config(
        n_p: usize,
        blocks: Vec<usize>,
        seeding: SeedingConfig,
        strategy: Strategy,
        seed: u64,
    ) -> SimConfig {
        SimConfig {
            field: FieldConfig::DoubleGyre {
                a: 0.1,
                eps: 0.25,
                omega: std::f64::consts::PI / 5.0,
            },
            decomposition: DecompositionConfig {
                blocks_per_axis: blocks,
                time_blocks: 1,
                ghost_width: 1,
            },
            processes: ProcessesConfig {
                count: n_p,
                memory_capacity: None,
            },
            seeding,
            tracing: TracingConfig {
                max_steps: 96,
                ..TracingConfig::default()
            },
            estimator: EstimatorConfig::default(),
            network: NetworkConfig::default(),
            agent: AgentConfig::default(),
            run: RunConfig {
                strategy,
                seed,
                round_cap: 200,
                validate: true,
            },
        }
    }

    #[test]
    fn a_single_process_run_is_all_compute() {
        let cfg = gyre_config(
            1,
            vec![2, 2],
            SeedingConfig::Uniform { count: 50 },
            Strategy::RlDonation,
            3,
        );
        let report = run(&cfg).unwrap();
        assert!(!report.round_cap_exceeded);
        assert_eq!(report.seeded, 50);
        // One process never communicates, so the makespan is pure tracing.
        let expected = report.total_steps as f64 * cfg.tracing.seconds_per_step;
        crate::testutil::assert_close(report.makespan, expected, 1e-12);
        assert_eq!(report.clocks[0].comm, 0.0);
        assert_eq!(report.imbalance, Some(1.0));
        assert!(report.donations.is_empty());
    }

    #[test]
    fn identical_seeds_reproduce_the_report_exactly() {
        let cfg = gyre_config(
            4,
            vec![4, 2],
            SeedingConfig::Uniform { count: 300 },
            Strategy::RlDonation,
            42,
        );
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_change_the_trajectories() {
        let base = gyre_config(
            2,
            vec![2, 2],
            SeedingConfig::Uniform { count: 100 },
            Strategy::Static,
            1,
        );
        let mut other = base.clone();
        other.run.seed = 2;
        let a = run(&base).unwrap();
        let b = run(&other).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn every_seeded_particle_terminates() {
        let cfg = gyre_config(
            4,
            vec![4, 2],
            SeedingConfig::Uniform { count: 200 },
            Strategy::Static,
            7,
        );
        let report = run(&cfg).unwrap();
        assert!(!report.round_cap_exceeded);
        let terminated = report.terminated_out_of_domain
            + report.terminated_max_steps
            + report.terminated_stopped;
        assert_eq!(terminated, report.seeded);
    }

    #[test]
    fn all_strategies_pass_the_validated_run() {
        for strategy in Strategy::ALL {
            let cfg = gyre_config(
                4,
                vec![4, 2],
                SeedingConfig::Uniform { count: 120 },
                strategy,
                11,
            );
            let report = run(&cfg).unwrap();
            assert!(!report.round_cap_exceeded, "{strategy} hit the round cap");
            assert!(report.makespan > 0.0);
        }
    }

    #[test]
    fn a_slow_process_donates_blocks_to_faster_friends() {
        // Rank 0 integrates ten times slower, so its four blocks carry ten
        // times the estimated cost of anyone else's. Offering one of them
        // keeps the donor above the receiver, so acceptances must appear.
        let mut cfg = gyre_config(
            4,
            vec![8, 2],
            SeedingConfig::Uniform { count: 400 },
            Strategy::RlDonation,
            5,
        );
        // Workloads must dwarf the ~20ms modeled block-transfer cost or
        // keeping the block genuinely is the better action.
        cfg.tracing.seconds_per_step_per_rank = Some(vec![1e-3, 1e-4, 1e-4, 1e-4]);
        let report = run(&cfg).unwrap();
        let accepted: Vec<_> = report
            .donations
            .iter()
            .filter(|d| d.accepted && d.target != d.donor)
            .collect();
        assert!(
            !accepted.is_empty(),
            "no accepted donation in {:?}",
            report.donations
        );
        assert!(accepted.iter().any(|d| d.donor == 0));
        // Accepted offers carry a reward, so rank 0 must have learned.
        let last_theta = report
            .policy_trace
            .iter()
            .rev()
            .find(|s| s.rank == 0)
            .unwrap()
            .theta;
        assert_ne!(last_theta, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn the_greedy_strategy_donates_without_learning() {
        let cfg = gyre_config(
            2,
            vec![4, 1],
            SeedingConfig::Region {
                count: 400,
                min: vec![0.0, 0.0],
                max: vec![0.9, 1.0],
            },
            Strategy::GreedyDonation,
            5,
        );
        let report = run(&cfg).unwrap();
        assert!(!report.donations.is_empty());
        assert!(report.donations.iter().all(|d| d.reward == 0.0));
        let flat = PolicyParams::new(cfg.agent.alpha).theta;
        assert!(report.policy_trace.iter().all(|s| s.theta == flat));
    }

    #[test]
    fn work_requesting_moves_particles_but_never_blocks() {
        let cfg = gyre_config(
            4,
            vec![4, 2],
            SeedingConfig::Region {
                count: 300,
                min: vec![0.0, 0.0],
                max: vec![0.45, 0.45],
            },
            Strategy::WorkRequesting,
            9,
        );
        let report = run(&cfg).unwrap();
        assert!(report.donations.is_empty());
        // Stealing shows up as communication time on more than one rank.
        let communicating = report.clocks.iter().filter(|c| c.comm > 0.0).count();
        assert!(communicating >= 2, "clocks: {:?}", report.clocks);
    }

    #[test]
    fn the_round_cap_stops_an_unfinished_run() {
        let mut cfg = gyre_config(
            2,
            vec![2, 2],
            SeedingConfig::Uniform { count: 100 },
            Strategy::Static,
            1,
        );
        cfg.run.round_cap = 2;
        let report = run(&cfg).unwrap();
        assert!(report.round_cap_exceeded);
        assert_eq!(report.rounds, 2);
    }

    #[test]
    fn lattice_seeding_covers_the_domain_corners() {
        let cfg = gyre_config(
            1,
            vec![2, 1],
            SeedingConfig::Lattice {
                points_per_axis: vec![3, 2],
            },
            Strategy::Static,
            0,
        );
        let field = cfg.build_field().unwrap();
        let decomp = decompose(field.domain(), &[2, 1], 1, None, 1).unwrap();
        let seeds = generate_seeds(&cfg, &field, &decomp).unwrap();
        assert_eq!(seeds.len(), 6);
        let positions: Vec<[f64; 2]> = seeds.iter().map(|p| [p.pos[0], p.pos[1]]).collect();
        assert!(positions.contains(&[0.0, 0.0]));
        assert!(positions.contains(&[2.0, 1.0]));
        assert!(positions.contains(&[1.0, 0.0]));
    }

    #[test]
    fn waves_release_front_loaded_remainders() {
        let seeds: Vec<Particle> = (0..17)
            .map(|i| Particle::new(i, [0.1, 0.1, 0.0], 0.0, BlockId(0)))
            .collect();
        let schedule = build_schedule(seeds);
        assert_eq!(schedule.len(), 10);
        let sizes: Vec<usize> = schedule
            .iter()
            .map(|w| w.iter().map(|(_, l)| l.len()).sum())
            .collect();
        assert_eq!(sizes, vec![2, 2, 2, 2, 2, 2, 2, 1, 1, 1]);
    }

    #[test]
    fn tiny_seed_sets_drop_empty_trailing_waves() {
        let seeds: Vec<Particle> = (0..3)
            .map(|i| Particle::new(i, [0.1, 0.1, 0.0], 0.0, BlockId(0)))
            .collect();
        let schedule = build_schedule(seeds);
        assert_eq!(schedule.len(), 3);
        assert!(schedule.iter().all(|w| !w.is_empty()));
    }

    #[test]
    fn a_region_outside_the_domain_is_rejected() {
        let cfg = gyre_config(
            1,
            vec![2, 1],
            SeedingConfig::Region {
                count: 10,
                min: vec![0.0, 0.0],
                max: vec![3.0, 1.0],
            },
            Strategy::Static,
            0,
        );
        assert!(matches!(run(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn mismatched_block_axes_are_rejected() {
        let cfg = gyre_config(
            1,
            vec![2, 2, 2],
            SeedingConfig::Uniform { count: 10 },
            Strategy::Static,
            0,
        );
        assert!(matches!(run(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn run_baseline_only_swaps_the_strategy() {
        let cfg = gyre_config(
            2,
            vec![2, 2],
            SeedingConfig::Uniform { count: 60 },
            Strategy::RlDonation,
            13,
        );
        let report = run_baseline(&cfg, Strategy::Static).unwrap();
        assert_eq!(report.strategy, Strategy::Static);
        assert_eq!(report.seed, 13);
        assert!(report.donations.is_empty());
    }
}
