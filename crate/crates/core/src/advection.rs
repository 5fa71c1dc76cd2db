//! Fixed-step RK4 advection of particles inside one block.
//!
//! A particle is advanced until it exits the block's non-ghost bounds, exits
//! the domain, hits the global step cap, or stalls at a critical point. Step
//! counts per block are the ground truth behind both the simulated compute
//! clocks and the workload estimator's training data.

use std::collections::VecDeque;

use crate::domain_decomp::{BlockId, Decomposition};
use crate::space::{axpy, norm, Point3};
use crate::vector_field::FieldSpec;
use crate::workload::TrajectoryPath;

/// Lifecycle state of a particle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParticleStatus {
    Active,
    /// Left the global domain boundary.
    OutOfDomain,
    /// Reached the global advection step cap.
    MaxSteps,
    /// Stalled at a (near-)zero-velocity point of a steady field.
    Stopped,
}

/// One traced particle.
#[derive(Debug, Clone)]
pub struct Particle {
    pub id: u64,
    pub pos: Point3,
    pub time: f64,
    pub steps_taken: u64,
    /// Ring buffer of the last blocks this particle exited, most recent
    /// last. Capacity is the estimator order.
    pub history: VecDeque<BlockId>,
    pub seed_block: BlockId,
    pub status: ParticleStatus,
}

impl Particle {
    #[must_use]
    pub fn new(id: u64, pos: Point3, time: f64, seed_block: BlockId) -> Self {
        Self {
            id,
            pos,
            time,
            steps_taken: 0,
            history: VecDeque::new(),
            seed_block,
            status: ParticleStatus::Active,
        }
    }

    /// Appends an exited block, keeping at most `capacity` entries.
    pub fn push_history(&mut self, block: BlockId, capacity: usize) {
        if capacity == 0 {
            return;
        }
        self.history.push_back(block);
        while self.history.len() > capacity {
            self.history.pop_front();
        }
    }

    /// The particle's length-`order` predecessor path, most recent block
    /// first, padded with the seeding block when the history is short.
    #[must_use]
    pub fn tree_path(&self, order: usize) -> TrajectoryPath {
        let mut path: TrajectoryPath = self.history.iter().rev().copied().collect();
        path.truncate(order);
        while path.len() < order {
            path.push(self.seed_block);
        }
        path
    }
}

/// Per-particle outcome of tracing within one block.
#[derive(Debug, Clone)]
pub struct TracedParticle {
    pub particle: Particle,
    /// RK4 steps taken inside this block during this trace call.
    pub steps_in_block: u64,
    /// Block the particle moved into, when it exited through a face.
    pub exit_target: Option<BlockId>,
}

/// Outcome of tracing a batch of particles within one block.
#[derive(Debug, Clone)]
pub struct TraceResult {
    pub block: BlockId,
    /// Traced particles in input order.
    pub particles: Vec<TracedParticle>,
    /// Total steps taken inside the block.
    pub steps: u64,
    /// Simulated compute seconds charged for those steps.
    pub wall_seconds_charged: f64,
}

/// One classical RK4 step.
///
/// Updates position (and, for unsteady fields, time) and increments
/// `steps_taken`. If the speed at the start of the step is below `v_eps` in a
/// steady field, the particle is marked [`ParticleStatus::Stopped`] and left
/// in place. Intermediate stages evaluate the field with out-of-range
/// samples clamped, so a stage probe beyond the domain cannot fail.
pub fn rk4_step(field: &FieldSpec, p: &mut Particle, h: f64, v_eps: f64) {
    debug_assert_eq!(p.status, ParticleStatus::Active);
    let k1 = field.eval_clamped(p.pos, p.time);
    if field.is_steady() && norm(k1) < v_eps {
        p.status = ParticleStatus::Stopped;
        return;
    }
    let half = 0.5 * h;
    let k2 = field.eval_clamped(axpy(p.pos, half, k1), p.time + half);
    let k3 = field.eval_clamped(axpy(p.pos, half, k2), p.time + half);
    let k4 = field.eval_clamped(axpy(p.pos, h, k3), p.time + h);
    for a in 0..3 {
        p.pos[a] += h * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]) / 6.0;
    }
    if !field.is_steady() {
        p.time += h;
    }
    p.steps_taken += 1;
}

/// Advects `particles` (all inside block `block_id`) until each exits the
/// block, exits the domain, reaches `max_steps` total steps, or stops.
///
/// Particles come back in input order. On a face exit the exited block is
/// appended to the particle's history (capacity `history_capacity`) and
/// `exit_target` names the entered block; with a sane step size that target
/// is always a neighbor of `block_id`. The block total is charged
/// `seconds_per_step` per step.
#[allow(clippy::too_many_arguments)]
pub fn trace_in_block(
    field: &FieldSpec,
    decomp: &Decomposition,
    block_id: BlockId,
    particles: Vec<Particle>,
    h: f64,
    max_steps: u64,
    v_eps: f64,
    history_capacity: usize,
    seconds_per_step: f64,
) -> TraceResult {
    let mut out = Vec::with_capacity(particles.len());
    let mut total_steps = 0u64;
    for mut p in particles {
        debug_assert_eq!(p.status, ParticleStatus::Active);
        debug_assert_eq!(decomp.locate_block(p.pos, p.time).ok(), Some(block_id));
        let mut steps_in_block = 0u64;
        let mut exit_target = None;
        loop {
            if p.steps_taken >= max_steps {
                p.status = ParticleStatus::MaxSteps;
                break;
            }
            rk4_step(field, &mut p, h, v_eps);
            if p.status == ParticleStatus::Stopped {
                break;
            }
            steps_in_block += 1;
            match decomp.locate_block(p.pos, p.time) {
                Err(_) => {
                    p.status = ParticleStatus::OutOfDomain;
                    break;
                }
                Ok(here) if here == block_id => {}
                Ok(here) => {
                    if p.steps_taken >= max_steps {
                        // The cap lands on the crossing step: the particle is
                        // finished and is not handed to the next block.
                        p.status = ParticleStatus::MaxSteps;
                    } else {
                        p.push_history(block_id, history_capacity);
                        exit_target = Some(here);
                    }
                    break;
                }
            }
        }
        total_steps += steps_in_block;
        out.push(TracedParticle {
            particle: p,
            steps_in_block,
            exit_target,
        });
    }
    TraceResult {
        block: block_id,
        particles: out,
        steps: total_steps,
        wall_seconds_charged: total_steps as f64 * seconds_per_step,
    }
}
