//! Run reports, balance metrics, and file exports.
//!
//! A finished simulation is summarized by a [`MetricsReport`]: makespan,
//! per-rank clocks, per-round estimation errors, the donation log, policy
//! traces, and a Gantt-style activity timeline. Reports export to a fixed
//! set of text files whose bytes depend only on the report contents, so a
//! deterministic run re-exports identically.

use std::fmt::Write as _;
use std::path::Path;

use crate::domain_decomp::{BlockId, Rank};
use crate::error::{Error, Result};
use crate::sim::Strategy;

/// What a rank was doing during one timeline interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivityKind {
    Compute,
    Comm,
    Idle,
}

impl ActivityKind {
    #[must_use]
    pub fn as_str(self) -> &'static str {
        match self {
            ActivityKind::Compute => "compute",
            ActivityKind::Comm => "comm",
            ActivityKind::Idle => "idle",
        }
    }
}

/// One half-open `[t_start, t_end)` span of a rank's timeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivityInterval {
    pub rank: Rank,
    pub kind: ActivityKind,
    pub t_start: f64,
    pub t_end: f64,
}

/// One donation decision, kept for every sampled action including keeps
/// (`target == donor`) and rejected requests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DonationRecord {
    pub round: u32,
    pub donor: Rank,
    pub block: BlockId,
    pub target: Rank,
    pub accepted: bool,
    pub reward: f64,
}

/// Accumulated activity seconds of one rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankClocks {
    pub rank: Rank,
    pub busy: f64,
    pub comm: f64,
    pub idle: f64,
}

/// Policy weights of one rank at the end of one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicySample {
    pub round: u32,
    pub rank: Rank,
    pub theta: [f64; 3],
}

/// Everything a simulation run reports.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub rounds: u32,
    pub round_cap_exceeded: bool,
    /// Total simulated wall seconds under the barrier-per-round model.
    pub makespan: f64,
    pub clocks: Vec<RankClocks>,
    /// Max-over-mean of per-rank advection seconds; absent when no rank
    /// advected anything.
    pub imbalance: Option<f64>,
    /// Per-round workload estimation error, for rounds with positive actual
    /// advection time.
    pub estimation_errors: Vec<(u32, f64)>,
    /// Estimation error aggregated over all rounds after the first, where
    /// the estimator has had at least one round of history.
    pub overall_estimation_error: Option<f64>,
    pub donations: Vec<DonationRecord>,
    pub policy_trace: Vec<PolicySample>,
    pub intervals: Vec<ActivityInterval>,
    pub seeded: u64,
    pub terminated_out_of_domain: u64,
    pub terminated_max_steps: u64,
    pub terminated_stopped: u64,
    pub total_steps: u64,
}

impl MetricsReport {
    /// Per-rank advection (compute) seconds, indexed by rank.
    #[must_use]
    pub fn per_rank_busy(&self) -> Vec<f64> {
        self.clocks.iter().map(|c| c.busy).collect()
    }
}

/// Max-over-mean load imbalance: 1.0 is perfect balance.
pub fn imbalance(per_rank_advection_seconds: &[f64]) -> Result<f64> {
    let n = per_rank_advection_seconds.len();
    if n == 0 || per_rank_advection_seconds.iter().all(|&s| s <= 0.0) {
        return Err(Error::NoWork);
    }
    let max = per_rank_advection_seconds
        .iter()
        .fold(f64::NEG_INFINITY, |m, &s| m.max(s));
    let mean = per_rank_advection_seconds.iter().sum::<f64>() / n as f64;
    Ok(max / mean)
}

/// Strong-scaling efficiency of an `n_p`-process run against a one-process
/// reference of the same scenario.
#[must_use]
pub fn parallel_efficiency(makespan_np: f64, makespan_1ref: f64, n_p: usize) -> f64 {
    makespan_1ref / (n_p as f64 * makespan_np)
}

/// Full-precision float formatting shared by every export: 18 significant
/// digits round-trip any finite `f64` exactly.
fn fmt_f64(x: f64) -> String {
    format!("{x:.17e}")
}

/// Writes the report as a directory of text files.
///
/// `summary.txt` holds `key = value` lines; `gantt.csv`,
/// `estimation_error.csv`, `donations.csv`, and `policy_trace.csv` hold the
/// timeline, per-round errors, donation log, and policy trace. All files
/// use LF line endings, `.` decimals, and a fixed column order, so equal
/// reports export byte-identical directories.
pub fn export_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut summary = String::new();
    let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), fmt_f64);
    writeln!(summary, "strategy = {}", report.strategy.as_str()).unwrap();
    writeln!(summary, "seed = {}", report.seed).unwrap();
    writeln!(summary, "rounds = {}", report.rounds).unwrap();
    writeln!(
        summary,
        "round_cap_exceeded = {}",
        report.round_cap_exceeded
    )
    .unwrap();
    writeln!(summary, "makespan = {}", fmt_f64(report.makespan)).unwrap();
    writeln!(summary, "imbalance = {}", opt(report.imbalance)).unwrap();
    writeln!(
        summary,
        "overall_estimation_error = {}",
        opt(report.overall_estimation_error)
    )
    .unwrap();
    writeln!(summary, "seeded = {}", report.seeded).unwrap();
    writeln!(
        summary,
        "terminated_out_of_domain = {}",
        report.terminated_out_of_domain
    )
    .unwrap();
    writeln!(
        summary,
        "terminated_max_steps = {}",
        report.terminated_max_steps
    )
    .unwrap();
    writeln!(
        summary,
        "terminated_stopped = {}",
        report.terminated_stopped
    )
    .unwrap();
    writeln!(summary, "total_steps = {}", report.total_steps).unwrap();
    for c in &report.clocks {
        writeln!(summary, "rank_{}_busy = {}", c.rank, fmt_f64(c.busy)).unwrap();
        writeln!(summary, "rank_{}_comm = {}", c.rank, fmt_f64(c.comm)).unwrap();
        writeln!(summary, "rank_{}_idle = {}", c.rank, fmt_f64(c.idle)).unwrap();
    }
    std::fs::write(dir.join("summary.txt"), summary)?;

    let mut gantt = String::from("rank,kind,t_start,t_end\n");
    let mut intervals = report.intervals.clone();
    intervals.sort_by(|a, b| {
        a.rank
            .cmp(&b.rank)
            .then(a.t_start.partial_cmp(&b.t_start).unwrap())
    });
    for iv in &intervals {
        writeln!(
            gantt,
            "{},{},{},{}",
            iv.rank,
            iv.kind.as_str(),
            fmt_f64(iv.t_start),
            fmt_f64(iv.t_end)
        )
        .unwrap();
    }
    std::fs::write(dir.join("gantt.csv"), gantt)?;

    let mut err_csv = String::from("round,relative_error\n");
    for &(round, e) in &report.estimation_errors {
        writeln!(err_csv, "{},{}", round, fmt_f64(e)).unwrap();
    }
    std::fs::write(dir.join("estimation_error.csv"), err_csv)?;

    let mut don_csv = String::from("round,donor,block,target,accepted,reward\n");
    for d in &report.donations {
        writeln!(
            don_csv,
            "{},{},{},{},{},{}",
            d.round,
            d.donor,
            d.block.0,
            d.target,
            d.accepted,
            fmt_f64(d.reward)
        )
        .unwrap();
    }
    std::fs::write(dir.join("donations.csv"), don_csv)?;

    let mut pol_csv = String::from("round,rank,theta1,theta2,theta3\n");
    for s in &report.policy_trace {
        writeln!(
            pol_csv,
            "{},{},{},{},{}",
            s.round,
            s.rank,
            fmt_f64(s.theta[0]),
            fmt_f64(s.theta[1]),
            fmt_f64(s.theta[2])
        )
        .unwrap();
    }
    std::fs::write(dir.join("policy_trace.csv"), pol_csv)?;

    Ok(())
}
