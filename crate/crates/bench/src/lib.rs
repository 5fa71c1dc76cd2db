//! Shared scenario builders for the criterion benchmarks.

use flowbal::sim::{
    AgentConfig, DecompositionConfig, EstimatorConfig, FieldConfig, NetworkConfig, ProcessesConfig,
    RunConfig, SeedingConfig, SimConfig, Strategy, TracingConfig,
};

/// A small four-process swirling-gyre scenario that finishes in well under a
/// second; used to benchmark a full simulation round loop.
pub fn small_gyre_run(strategy: Strategy, seeds: u64) -> SimConfig {
    SimConfig {
        field: FieldConfig::DoubleGyre {
            a: 0.1,
            eps: 0.25,
            omega: std::f64::consts::PI / 5.0,
        },
        decomposition: DecompositionConfig {
            blocks_per_axis: vec![4, 2],
            time_blocks: 1,
            ghost_width: 1,
        },
        processes: ProcessesConfig {
            count: 4,
            memory_capacity: None,
        },
        seeding: SeedingConfig::Uniform { count: seeds },
        tracing: TracingConfig {
            max_steps: 128,
            ..TracingConfig::default()
        },
        estimator: EstimatorConfig::default(),
        network: NetworkConfig::default(),
        agent: AgentConfig::default(),
        run: RunConfig {
            strategy,
            seed: 42,
            round_cap: 500,
            validate: false,
        },
    }
}
