//! Deterministic simulator and library for load-balanced data-parallel
//! particle tracing.
//!
//! A set of simulated processes advects particles through a vector field whose
//! domain is split into blocks. Each process predicts the advection work its
//! blocks will receive next round from per-block trajectory statistics, fits a
//! linear cost model to observed transfers, and runs a small policy-gradient
//! agent that decides whether to donate a block to a friend process so that
//! the round's makespan shrinks. Everything is seeded and single-threaded, so
//! identical configurations reproduce bit-identical results.
//!
//! Module map:
//!
//! * [`vector_field`] — analytic and gridded velocity fields.
//! * [`domain_decomp`] — block decomposition, ownership, friend topology.
//! * [`advection`] — RK4 tracing of particles inside a block.
//! * [`workload`] — trajectory trees and per-block workload estimation.
//! * [`comm`] — linear communication-cost models fitted from observations.
//! * [`agent`] — cost features, softmax policy, and REINFORCE updates.
//! * [`sim`] — the round-based simulation loop and donation protocol.
//! * [`metrics`] — run reports, balance metrics, and file exports.

pub mod advection;
pub mod agent;
pub mod comm;
pub mod domain_decomp;
mod error;
pub mod metrics;
pub mod sim;
pub mod space;
#[cfg(test)]
pub(crate) mod testutil;
pub mod vector_field;
pub mod workload;

pub use advection::{trace_in_block, Particle, ParticleStatus, TraceResult};
pub use agent::{Action, DecisionContext, PolicyParams};
pub use comm::{CommCostModel, TransferKind, TransferRecord};
pub use domain_decomp::{
    friend_set, round_robin_assign, Block, BlockAssignment, BlockId, Decomposition, Rank,
};
pub use error::{Error, Result};
pub use metrics::{imbalance, parallel_efficiency, MetricsReport};
pub use sim::{run, run_baseline, SimConfig, Strategy};
pub use space::{Aabb, Point3};
pub use vector_field::{load_grid, FieldSpec};
pub use workload::{
    relative_error, AdvectionRateTracker, IncomingCounts, TrajectoriesTree, TrajectoryPath,
};
