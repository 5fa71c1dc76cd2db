//! Run configuration: TOML deserialization, defaults, and validation.
//!
//! A [`SimConfig`] describes one experiment end to end — the velocity
//! field, the block decomposition, the simulated process count, seeding,
//! integration parameters, the modeled network, the agent learning rate,
//! and run control. Structural validation happens in [`SimConfig::validate`];
//! checks that need the field built (dimension agreement, seeding boxes
//! inside the domain) happen when the run assembles its scenario.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::domain_decomp::{Decomposition, Rank};
use crate::error::{Error, Result};
use crate::vector_field::{load_grid, FieldSpec};

/// Rebalancing strategy executed each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Learned donation: overloaded processes donate blocks to friends
    /// chosen by a trained softmax policy.
    RlDonation,
    /// No rebalancing; the initial round-robin assignment is final.
    Static,
    /// Donation to the lowest-workload friend, without learning.
    GreedyDonation,
    /// Idle processes pull half of a random friend's pending particles;
    /// blocks never move.
    WorkRequesting,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::RlDonation,
        Strategy::Static,
        Strategy::GreedyDonation,
        Strategy::WorkRequesting,
    ];

    #[must_use]
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::RlDonation => "rl_donation",
            Strategy::Static => "static",
            Strategy::GreedyDonation => "greedy_donation",
            Strategy::WorkRequesting => "work_requesting",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy `{s}`")))
    }
}

/// Velocity field selection.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldConfig {
    /// Steady Arnold–Beltrami–Childress flow on `[0, 2π]³`.
    AbcFlow {
        #[serde(default = "default_abc_a")]
        a: f64,
        #[serde(default = "default_abc_b")]
        b: f64,
        #[serde(default = "default_abc_c")]
        c: f64,
    },
    /// Unsteady double-gyre flow on `[0, 2] × [0, 1]`.
    DoubleGyre {
        #[serde(default = "default_dg_a")]
        a: f64,
        #[serde(default = "default_dg_eps")]
        eps: f64,
        #[serde(default = "default_dg_omega")]
        omega: f64,
    },
    /// Regular-grid field loaded from a header/raw file pair.
    Grid { header: PathBuf, data: PathBuf },
}

fn default_abc_a() -> f64 {
    3f64.sqrt()
}
fn default_abc_b() -> f64 {
    2f64.sqrt()
}
fn default_abc_c() -> f64 {
    1.0
}
fn default_dg_a() -> f64 {
    0.1
}
fn default_dg_eps() -> f64 {
    0.25
}
fn default_dg_omega() -> f64 {
    std::f64::consts::PI / 5.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompositionConfig {
    /// Blocks per spatial axis; length must match the field dimension.
    pub blocks_per_axis: Vec<usize>,
    #[serde(default = "default_one")]
    pub time_blocks: usize,
    #[serde(default = "default_one")]
    pub ghost_width: usize,
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessesConfig {
    pub count: usize,
    /// Maximum resident blocks per process; defaults to four times the
    /// initial per-process block count.
    #[serde(default)]
    pub memory_capacity: Option<usize>,
}

/// Where the initial particles come from.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SeedingConfig {
    /// `count` seeds drawn uniformly over the whole domain.
    Uniform { count: u64 },
    /// `count` seeds drawn uniformly inside the `[min, max]` box.
    Region {
        count: u64,
        min: Vec<f64>,
        max: Vec<f64>,
    },
    /// A regular lattice with the given number of points per axis,
    /// endpoints on the domain boundary.
    Lattice { points_per_axis: Vec<usize> },
}

impl SeedingConfig {
    /// Number of seeds this configuration produces.
    #[must_use]
    pub fn count(&self) -> u64 {
        match self {
            SeedingConfig::Uniform { count } | SeedingConfig::Region { count, .. } => *count,
            SeedingConfig::Lattice { points_per_axis } => {
                points_per_axis.iter().map(|&n| n as u64).product()
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TracingConfig {
    /// RK4 step size; 0 selects one sixteenth of the smallest block edge.
    pub h: f64,
    pub max_steps: u64,
    /// Speed below which a particle in a steady field counts as stopped.
    pub v_eps: f64,
    /// Simulated compute seconds charged per advection step.
    pub seconds_per_step: f64,
    /// Optional per-rank override of `seconds_per_step` (heterogeneous
    /// machines); length must equal the process count.
    pub seconds_per_step_per_rank: Option<Vec<f64>>,
}

impl Default for TracingConfig {
    fn default() -> Self {
        Self {
            h: 0.0,
            max_steps: 512,
            v_eps: 1e-12,
            seconds_per_step: 1e-6,
            seconds_per_step_per_rank: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// Trajectory-history length per particle; 0 falls back to per-block
    /// historical averages.
    pub order: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { order: 4 }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Per-event start-up seconds of the simulated network (true value).
    pub latency: f64,
    /// True seconds per transferred block.
    pub d_block: f64,
    /// True seconds per transferred particle.
    pub d_particle: f64,
    /// Multiplicative noise fraction on simulated transfer times.
    pub noise_sigma: f64,
    /// Seconds to load a non-resident block when work requesting pulls
    /// particles whose block the thief does not own.
    pub block_load_seconds: f64,
    /// Cost-model priors used before any fit exists.
    pub prior_d_block: f64,
    pub prior_d_particle: f64,
    pub prior_latency: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            latency: 1e-3,
            d_block: 1e-2,
            d_particle: 1e-5,
            noise_sigma: 0.0,
            block_load_seconds: 5e-2,
            prior_d_block: 1e-2,
            prior_d_particle: 1e-6,
            prior_latency: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    /// Policy learning rate.
    pub alpha: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self { alpha: 0.01 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub seed: u64,
    pub round_cap: u32,
    /// Check runtime invariants after every round and fail the run on a
    /// violation.
    pub validate: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::RlDonation,
            seed: 0,
            round_cap: 1000,
            validate: false,
        }
    }
}

/// Complete description of one simulation run.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub field: FieldConfig,
    pub decomposition: DecompositionConfig,
    pub processes: ProcessesConfig,
    pub seeding: SeedingConfig,
    #[serde(default)]
    pub tracing: TracingConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub run: RunConfig,
}

impl SimConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SimConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, parses, and validates a TOML config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Structural validation that needs no file access.
    pub fn validate(&self) -> Result<()> {
        fn bad(msg: impl Into<String>) -> Error {
            Error::InvalidConfig(msg.into())
        }
        let d = &self.decomposition;
        if !(2..=3).contains(&d.blocks_per_axis.len()) {
            return Err(bad("blocks_per_axis must list 2 or 3 axes"));
        }
        if d.blocks_per_axis.contains(&0) || d.time_blocks == 0 {
            return Err(bad("block counts must be at least 1"));
        }
        if self.processes.count == 0 {
            return Err(bad("process count must be at least 1"));
        }
        if self.processes.memory_capacity == Some(0) {
            return Err(bad("memory capacity must be at least 1"));
        }
        match &self.seeding {
            SeedingConfig::Uniform { count } if *count == 0 => {
                return Err(bad("seed count must be at least 1"));
            }
            SeedingConfig::Region { count, min, max } => {
                if *count == 0 {
                    return Err(bad("seed count must be at least 1"));
                }
                if min.len() != max.len() || !(2..=3).contains(&min.len()) {
                    return Err(bad("seeding box must give 2 or 3 coordinates per corner"));
                }
                if min
                    .iter()
                    .zip(max)
                    .any(|(lo, hi)| lo.is_nan() || hi.is_nan() || lo >= hi)
                {
                    return Err(bad("seeding box must satisfy min < max on every axis"));
                }
            }
            SeedingConfig::Lattice { points_per_axis } => {
                if !(2..=3).contains(&points_per_axis.len()) {
                    return Err(bad("lattice must give 2 or 3 axis point counts"));
                }
                if points_per_axis.contains(&0) {
                    return Err(bad("lattice point counts must be at least 1"));
                }
            }
            SeedingConfig::Uniform { .. } => {}
        }
        let t = &self.tracing;
        if !t.h.is_finite() || t.h < 0.0 {
            return Err(bad("step size must be finite and non-negative"));
        }
        if t.max_steps == 0 {
            return Err(bad("max_steps must be at least 1"));
        }
        if t.v_eps.is_nan() || t.v_eps < 0.0 {
            return Err(bad("v_eps must be non-negative"));
        }
        if t.seconds_per_step.is_nan() || t.seconds_per_step <= 0.0 {
            return Err(bad("seconds_per_step must be positive"));
        }
        if let Some(per_rank) = &t.seconds_per_step_per_rank {
            if per_rank.len() != self.processes.count {
                return Err(bad(
                    "seconds_per_step_per_rank must list one value per process",
                ));
            }
            if per_rank.iter().any(|&s| s.is_nan() || s <= 0.0) {
                return Err(bad("per-rank seconds_per_step values must be positive"));
            }
        }
        if self.estimator.order > 8 {
            return Err(bad("estimator order must be at most 8"));
        }
        let n = &self.network;
        for (name, v) in [
            ("latency", n.latency),
            ("d_block", n.d_block),
            ("d_particle", n.d_particle),
            ("block_load_seconds", n.block_load_seconds),
            ("prior_d_block", n.prior_d_block),
            ("prior_d_particle", n.prior_d_particle),
            ("prior_latency", n.prior_latency),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(bad(format!(
                    "network.{name} must be finite and non-negative"
                )));
            }
        }
        if !(0.0..=1.0).contains(&n.noise_sigma) {
            return Err(bad("network.noise_sigma must lie in [0, 1]"));
        }
        if self.agent.alpha.is_nan() || self.agent.alpha <= 0.0 {
            return Err(bad("agent.alpha must be positive"));
        }
        if self.run.round_cap == 0 {
            return Err(bad("round_cap must be at least 1"));
        }
        Ok(())
    }

    /// Builds the velocity field, reading grid files when needed.
    pub fn build_field(&self) -> Result<FieldSpec> {
        match &self.field {
            FieldConfig::AbcFlow { a, b, c } => Ok(FieldSpec::abc_flow(*a, *b, *c)),
            FieldConfig::DoubleGyre { a, eps, omega } => {
                Ok(FieldSpec::double_gyre(*a, *eps, *omega))
            }
            FieldConfig::Grid { header, data } => load_grid(header, data),
        }
    }

    /// The RK4 step size: the configured value, or one sixteenth of the
    /// smallest block edge when the configured value is zero.
    #[must_use]
    pub fn step_size(&self, decomp: &Decomposition) -> f64 {
        if self.tracing.h > 0.0 {
            return self.tracing.h;
        }
        let domain = decomp.domain();
        let counts = decomp.counts();
        let mut min_edge = f64::INFINITY;
        for (a, &k) in counts.iter().enumerate().take(domain.dim) {
            min_edge = min_edge.min(domain.extent(a) / k as f64);
        }
        min_edge / 16.0
    }

    /// Simulated compute seconds per advection step for `rank`.
    #[must_use]
    pub fn seconds_per_step(&self, rank: Rank) -> f64 {
        self.tracing
            .seconds_per_step_per_rank
            .as_ref()
            .map_or(self.tracing.seconds_per_step, |v| v[rank])
    }

    /// Effective per-process block capacity for `n_blocks` total blocks.
    #[must_use]
    pub fn memory_capacity(&self, n_blocks: usize) -> usize {
        self.processes
            .memory_capacity
            .unwrap_or_else(|| 4 * n_blocks.div_ceil(self.processes.count).max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [field]
        kind = "double_gyre"

        [decomposition]
        blocks_per_axis = [8, 4]

        [processes]
        count = 4

        [seeding]
        mode = "uniform"
        count = 1000
    "#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = SimConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.processes.count, 4);
        assert_eq!(cfg.estimator.order, 4);
        assert_eq!(cfg.tracing.max_steps, 512);
        assert_eq!(cfg.tracing.seconds_per_step, 1e-6);
        assert_eq!(cfg.run.strategy, Strategy::RlDonation);
        assert_eq!(cfg.run.round_cap, 1000);
        assert!(!cfg.run.validate);
        assert_eq!(cfg.network.latency, 1e-3);
        assert_eq!(cfg.seeding.count(), 1000);
        match cfg.field {
            FieldConfig::DoubleGyre { a, eps, omega } => {
                assert_eq!(a, 0.1);
                assert_eq!(eps, 0.25);
                assert!((omega - std::f64::consts::PI / 5.0).abs() < 1e-15);
            }
            other => panic!("unexpected field {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[tracing]\nstep = 0.1\n");
        assert!(matches!(
            SimConfig::from_toml_str(&text),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let cases = [
            ("count = 4", "count = 0", "zero processes"),
            ("count = 1000", "count = 0", "zero seeds"),
        ];
        for (from, to, why) in cases {
            let text = MINIMAL.replace(from, to);
            assert!(
                matches!(
                    SimConfig::from_toml_str(&text),
                    Err(Error::InvalidConfig(_))
                ),
                "{why} should be rejected"
            );
        }
        for (section, why) in [
            ("[estimator]\norder = 9", "order over 8"),
            ("[network]\nnoise_sigma = 1.5", "sigma over 1"),
            ("[run]\nround_cap = 0", "zero round cap"),
            ("[tracing]\nseconds_per_step = 0.0", "zero step cost"),
            (
                "[tracing]\nseconds_per_step_per_rank = [1e-6]",
                "wrong per-rank length",
            ),
        ] {
            let text = format!("{MINIMAL}\n{section}\n");
            assert!(
                matches!(
                    SimConfig::from_toml_str(&text),
                    Err(Error::InvalidConfig(_))
                ),
                "{why} should be rejected"
            );
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("best_effort".parse::<Strategy>().is_err());
    }

    #[test]
    fn auto_step_size_uses_the_smallest_block_edge() {
        let cfg = SimConfig::from_toml_str(MINIMAL).unwrap();
        let field = cfg.build_field().unwrap();
        let decomp = crate::domain_decomp::decompose(
            field.domain(),
            &cfg.decomposition.blocks_per_axis,
            1,
            None,
            1,
        )
        .unwrap();
        // Blocks are 0.25 × 0.25, so the auto step is 0.25 / 16.
        assert_eq!(cfg.step_size(&decomp), 0.25 / 16.0);
    }

    #[test]
    fn capacity_defaults_to_four_times_initial_share() {
        let cfg = SimConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.memory_capacity(32), 32);
        let with_cap = format!(
            "{}\n",
            MINIMAL.replace("count = 4", "count = 4\n        memory_capacity = 3")
        );
        let cfg = SimConfig::from_toml_str(&with_cap).unwrap();
        assert_eq!(cfg.memory_capacity(32), 3);
    }
}
