//! Per-process donation agents: cost model, softmax policy, and the
//! policy-gradient update.
//!
//! Overloaded processes decide, once per round, whether to donate one of
//! their blocks to a friend process. The decision is sampled from a
//! log-linear softmax policy over candidate targets whose features compare
//! the candidate's workload against the donor's and price the block and
//! particle traffic the move would cause. After the move is accepted or
//! declined, the realized change in the donor's neighborhood cost becomes
//! the reward for a reinforcement update of the policy weights.

use std::collections::{BTreeMap, BTreeSet};

use crate::comm::TransferRates;
use crate::domain_decomp::{BlockId, Decomposition, Rank};
use crate::error::{Error, Result};

/// Learnable policy weights and their optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    /// Feature weights; kept non-negative by projection after each update.
    pub theta: [f64; 3],
    /// Running average of squared effective gradients (RMSProp state).
    pub sq_grad_avg: [f64; 3],
    /// Base learning rate.
    pub alpha: f64,
    /// Squared-gradient averaging factor.
    pub decay: f64,
    /// Denominator guard for the adaptive step.
    pub epsilon: f64,
}

impl PolicyParams {
    #[must_use]
    pub fn new(alpha: f64) -> Self {
        Self {
            theta: [1.0; 3],
            sq_grad_avg: [0.0; 3],
            alpha,
            decay: 0.99,
            epsilon: 1e-8,
        }
    }
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self::new(0.01)
    }
}

/// A donation decision: move `block` to `target` (which may be the current
/// owner — keeping the block is a valid action).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Action {
    pub block: BlockId,
    pub target: Rank,
}

/// Expected particle traffic across block faces, keyed by direction.
///
/// `flow(from, to)` is the expected number of particles crossing from block
/// `from` into block `to` per round, estimated from the previous round's
/// observed exits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundaryFlows {
    counts: BTreeMap<(BlockId, BlockId), u64>,
}

impl BoundaryFlows {
    pub fn add(&mut self, from: BlockId, to: BlockId, count: u64) {
        if count > 0 {
            *self.counts.entry((from, to)).or_insert(0) += count;
        }
    }

    #[must_use]
    pub fn flow(&self, from: BlockId, to: BlockId) -> u64 {
        self.counts.get(&(from, to)).copied().unwrap_or(0)
    }

    /// Expected arrivals into `block` from each of the given neighbors.
    #[must_use]
    pub fn incoming_to(&self, block: BlockId, neighbors: &[BlockId]) -> BTreeMap<BlockId, u64> {
        neighbors
            .iter()
            .map(|&j| (j, self.flow(j, block)))
            .collect()
    }
}

/// Everything a donor observes when deciding where to send one block.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionContext {
    /// The deciding process.
    pub owner: Rank,
    /// The sampled block being considered for donation.
    pub block: BlockId,
    /// Estimated advection seconds of `block`; must be positive.
    pub workload: f64,
    /// Estimated advection seconds per rank over the owner's friend set,
    /// including the owner itself. The key set is the candidate target set.
    pub friend_workloads: BTreeMap<Rank, f64>,
    /// Per-entity transfer costs from the owner's communication model.
    pub rates: TransferRates,
    /// Expected arrivals into `block` from each neighboring block.
    pub incoming_counts: BTreeMap<BlockId, u64>,
    /// Current owner of each neighboring block.
    pub neighbor_owners: BTreeMap<BlockId, Rank>,
}

impl DecisionContext {
    /// Candidate donation targets, in ascending rank order.
    #[must_use]
    pub fn candidates(&self) -> Vec<Rank> {
        self.friend_workloads.keys().copied().collect()
    }
}

/// Total estimated advection seconds of a block set. Blocks without an
/// estimate contribute zero.
#[must_use]
pub fn advection_cost(blocks: &BTreeSet<BlockId>, estimates: &BTreeMap<BlockId, f64>) -> f64 {
    blocks
        .iter()
        .map(|b| estimates.get(b).copied().unwrap_or(0.0))
        .sum()
}

/// Cost of the block moves that turn ownership `before` into `after`:
/// departing blocks are priced at the send rate, arriving ones at the
/// receive rate.
#[must_use]
pub fn block_transfer_cost(
    before: &BTreeSet<BlockId>,
    after: &BTreeSet<BlockId>,
    d_block_send: f64,
    d_block_recv: f64,
) -> f64 {
    let sent = before.difference(after).count() as f64;
    let received = after.difference(before).count() as f64;
    sent * d_block_send + received * d_block_recv
}

/// Cost of the cross-process particle traffic implied by ownership `after`,
/// priced from the expected per-round boundary flows.
///
/// Sends are charged for particles leaving a currently owned block toward a
/// neighbor that will not be owned; receives for particles arriving into a
/// block that will be owned from a neighbor that is not currently owned.
#[must_use]
pub fn particle_transfer_cost(
    before: &BTreeSet<BlockId>,
    after: &BTreeSet<BlockId>,
    flows: &BoundaryFlows,
    decomp: &Decomposition,
    d_particle_send: f64,
    d_particle_recv: f64,
) -> f64 {
    let mut cost = 0.0;
    for &i in before {
        for j in decomp.block_neighbors(i) {
            if !after.contains(&j) {
                cost += flows.flow(i, j) as f64 * d_particle_send;
            }
        }
    }
    for &i in after {
        for j in decomp.block_neighbors(i) {
            if !before.contains(&j) {
                cost += flows.flow(j, i) as f64 * d_particle_recv;
            }
        }
    }
    cost
}

/// Estimated total cost of one process after an ownership change:
/// advection over the new block set plus the block and particle transfer
/// costs of getting there. All terms are seconds and sum directly.
#[must_use]
#[allow(clippy::too_many_arguments)]
pub fn process_cost(
    before: &BTreeSet<BlockId>,
    after: &BTreeSet<BlockId>,
    estimates: &BTreeMap<BlockId, f64>,
    flows: &BoundaryFlows,
    decomp: &Decomposition,
    rates: TransferRates,
) -> f64 {
    advection_cost(after, estimates)
        + block_transfer_cost(before, after, rates.d_block_send, rates.d_block_recv)
        + particle_transfer_cost(
            before,
            after,
            flows,
            decomp,
            rates.d_particle_send,
            rates.d_particle_recv,
        )
}

/// Neighborhood execution cost: the maximum per-rank cost plus the
/// population standard deviation across the neighborhood. The spread term
/// makes uneven neighborhoods costlier than even ones with the same peak.
pub fn local_exec_cost(friend_costs: &BTreeMap<Rank, f64>) -> Result<f64> {
    if friend_costs.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    let n = friend_costs.len() as f64;
    let max = friend_costs
        .values()
        .fold(f64::NEG_INFINITY, |m, &c| m.max(c));
    let mean = friend_costs.values().sum::<f64>() / n;
    let var = friend_costs
        .values()
        .map(|&c| (c - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(max + var.sqrt())
}

/// Reward of an action: the drop in neighborhood execution cost it caused.
/// Positive when the action lowered the donor's neighborhood cost.
pub fn reward(
    friend_costs_before: &BTreeMap<Rank, f64>,
    friend_costs_after: &BTreeMap<Rank, f64>,
) -> Result<f64> {
    Ok(local_exec_cost(friend_costs_before)? - local_exec_cost(friend_costs_after)?)
}

/// Feature vector of donating `ctx.block` to `target`.
///
/// Component 0 compares workloads with the block excluded on both sides,
/// component 1 prices the block transfer, and component 2 scores how much
/// of the block's incoming particle traffic originates at the target versus
/// at the owner. All components are exactly zero for the keep action.
#[must_use]
pub fn feature_vector(ctx: &DecisionContext, target: Rank) -> [f64; 3] {
    let own = ctx.friend_workloads.get(&ctx.owner).copied().unwrap_or(0.0);
    let self_excl = own - ctx.workload;
    let target_excl = if target == ctx.owner {
        self_excl
    } else {
        ctx.friend_workloads.get(&target).copied().unwrap_or(0.0)
    };
    let phi1 = self_excl - target_excl;

    let phi2 = if target == ctx.owner {
        0.0
    } else {
        -(ctx.rates.d_block_send + ctx.rates.d_block_recv)
    };

    let unit = ctx.rates.d_particle_send + ctx.rates.d_particle_recv;
    let mut phi3 = 0.0;
    for (j, &count) in &ctx.incoming_counts {
        let Some(&owner_of_j) = ctx.neighbor_owners.get(j) else {
            continue;
        };
        let traffic = count as f64 * unit;
        if owner_of_j == target {
            phi3 += traffic;
        }
        if owner_of_j == ctx.owner {
            phi3 -= traffic;
        }
    }

    [phi1, phi2, phi3]
}

/// Policy latent: the feature/weight inner product scaled by the reciprocal
/// of the block's workload. No bias term.
pub fn latent(theta: [f64; 3], phi: [f64; 3], workload: f64) -> Result<f64> {
    if workload.is_nan() || workload <= 0.0 {
        return Err(Error::ZeroWorkload);
    }
    let dot: f64 = (0..3).map(|c| theta[c] * phi[c]).sum();
    Ok(dot / workload)
}

/// Softmax policy over the candidate targets of `ctx`, computed with
/// max-subtraction so large latents cannot overflow.
pub fn policy(theta: [f64; 3], ctx: &DecisionContext) -> Result<BTreeMap<Rank, f64>> {
    let mut latents = BTreeMap::new();
    for target in ctx.candidates() {
        let phi = feature_vector(ctx, target);
        latents.insert(target, latent(theta, phi, ctx.workload)?);
    }
    if latents.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    let max = latents.values().fold(f64::NEG_INFINITY, |m, &z| m.max(z));
    let mut probs: BTreeMap<Rank, f64> = latents
        .iter()
        .map(|(&r, &z)| (r, (z - max).exp()))
        .collect();
    let total: f64 = probs.values().sum();
    for p in probs.values_mut() {
        *p /= total;
    }
    Ok(probs)
}

/// Gradient of the log-probability of choosing `target`, with respect to
/// the policy weights: the chosen action's features minus the
/// policy-weighted feature mean, scaled by the reciprocal workload.
pub fn log_policy_gradient(
    ctx: &DecisionContext,
    target: Rank,
    probs: &BTreeMap<Rank, f64>,
) -> Result<[f64; 3]> {
    if ctx.workload.is_nan() || ctx.workload <= 0.0 {
        return Err(Error::ZeroWorkload);
    }
    let chosen = feature_vector(ctx, target);
    let mut mean = [0.0; 3];
    for (&r, &p) in probs {
        let phi = feature_vector(ctx, r);
        for c in 0..3 {
            mean[c] += p * phi[c];
        }
    }
    let mut grad = [0.0; 3];
    for c in 0..3 {
        grad[c] = (chosen[c] - mean[c]) / ctx.workload;
    }
    Ok(grad)
}

/// Adaptive gradient-ascent step on the policy weights.
///
/// The effective gradient is the log-policy gradient scaled by the reward;
/// when it is identically zero (for example, reward 0) the parameters and
/// optimizer state are left untouched. Weights are clamped non-negative
/// after the step.
pub fn update_policy(params: &mut PolicyParams, gradient: [f64; 3], reward: f64) {
    let g: [f64; 3] = [
        gradient[0] * reward,
        gradient[1] * reward,
        gradient[2] * reward,
    ];
    if g.iter().all(|&c| c == 0.0) {
        return;
    }
    for (c, &gc) in g.iter().enumerate() {
        params.sq_grad_avg[c] =
            params.decay * params.sq_grad_avg[c] + (1.0 - params.decay) * gc * gc;
        params.theta[c] += params.alpha * gc / (params.sq_grad_avg[c].sqrt() + params.epsilon);
        params.theta[c] = params.theta[c].max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::Aabb;
    use crate::testutil::assert_close;
    use proptest::prelude::*;
    use rand::distributions::Distribution;
    use rand::SeedableRng;

    fn set(ids: &[usize]) -> BTreeSet<BlockId> {
        ids.iter().map(|&i| BlockId(i)).collect()
    }

    fn zero_rates() -> TransferRates {
        TransferRates {
            d_block_send: 0.0,
            d_block_recv: 0.0,
            d_particle_send: 0.0,
            d_particle_recv: 0.0,
        }
    }

    fn two_block_chain() -> Decomposition {
        let domain = Aabb::steady([0.0, 0.0, 0.0], [2.0, 1.0, 0.0], 2);
        crate::domain_decomp::decompose(domain, &[2, 1], 1, None, 1).unwrap()
    }

    #[test]
    fn advection_cost_sums_known_blocks() {
        let estimates: BTreeMap<BlockId, f64> =
            [(BlockId(0), 2.0), (BlockId(1), 3.5)].into_iter().collect();
        assert_eq!(advection_cost(&set(&[]), &estimates), 0.0);
        assert_eq!(advection_cost(&set(&[0, 1]), &estimates), 5.5);
        // A block with no estimate (e.g. an empty trajectory tree) adds nothing.
        assert_eq!(advection_cost(&set(&[0, 7]), &estimates), 2.0);
    }

    #[test]
    fn block_transfer_cost_prices_set_differences() {
        let a = set(&[0, 1, 2]);
        assert_eq!(block_transfer_cost(&a, &a, 0.02, 0.03), 0.0);
        // Donor side: one block leaves.
        assert_close(
            block_transfer_cost(&set(&[0, 1]), &set(&[0]), 0.02, 0.03),
            0.02,
            1e-15,
        );
        // Receiver side: one block arrives.
        assert_close(
            block_transfer_cost(&set(&[0]), &set(&[0, 1]), 0.02, 0.03),
            0.03,
            1e-15,
        );
    }

    #[test]
    fn particle_transfer_cost_follows_ownership() {
        let decomp = two_block_chain();
        let mut flows = BoundaryFlows::default();
        flows.add(BlockId(0), BlockId(1), 10);

        // Both blocks owned: nothing crosses a process boundary.
        let both = set(&[0, 1]);
        assert_eq!(
            particle_transfer_cost(&both, &both, &flows, &decomp, 1e-4, 1e-4),
            0.0
        );
        // Owning only block 0: the 10 outgoing particles are sends.
        let only0 = set(&[0]);
        assert_close(
            particle_transfer_cost(&only0, &only0, &flows, &decomp, 1e-4, 2e-4),
            1e-3,
            1e-12,
        );
        // Owning only block 1: the same 10 particles are receives.
        let only1 = set(&[1]);
        assert_close(
            particle_transfer_cost(&only1, &only1, &flows, &decomp, 1e-4, 2e-4),
            2e-3,
            1e-12,
        );
    }

    #[test]
    fn bidirectional_chain_charges_both_sides() {
        let decomp = two_block_chain();
        let mut flows = BoundaryFlows::default();
        flows.add(BlockId(0), BlockId(1), 5);
        flows.add(BlockId(1), BlockId(0), 5);
        let only0 = set(&[0]);
        let only1 = set(&[1]);
        // Each process pays 5 sends and 5 receives at 1e-4 each.
        for owned in [&only0, &only1] {
            assert_close(
                particle_transfer_cost(owned, owned, &flows, &decomp, 1e-4, 1e-4),
                1e-3,
                1e-12,
            );
        }
    }

    #[test]
    fn process_cost_sums_all_three_terms() {
        let decomp = two_block_chain();
        let estimates: BTreeMap<BlockId, f64> =
            [(BlockId(0), 3.0), (BlockId(1), 2.0)].into_iter().collect();
        let flows = BoundaryFlows::default();
        let rates = zero_rates();
        let both = set(&[0, 1]);
        assert_close(
            process_cost(&both, &both, &estimates, &flows, &decomp, rates),
            5.0,
            1e-15,
        );
        assert_eq!(
            process_cost(&set(&[]), &set(&[]), &estimates, &flows, &decomp, rates),
            0.0
        );
        // Donating block 1 (w = 2) from a 5 s process: advection drops to 3
        // and the donor pays the block send.
        let rates = TransferRates {
            d_block_send: 0.02,
            ..zero_rates()
        };
        assert_close(
            process_cost(&both, &set(&[0]), &estimates, &flows, &decomp, rates),
            3.02,
            1e-12,
        );
    }

    #[test]
    fn neighborhood_cost_is_max_plus_spread() {
        let costs = |v: &[f64]| -> BTreeMap<Rank, f64> { v.iter().copied().enumerate().collect() };
        assert_close(
            local_exec_cost(&costs(&[4.0, 4.0, 4.0])).unwrap(),
            4.0,
            1e-15,
        );
        assert_close(local_exec_cost(&costs(&[2.0, 6.0])).unwrap(), 8.0, 1e-15);
        assert_close(local_exec_cost(&costs(&[3.0])).unwrap(), 3.0, 1e-15);
        assert!(matches!(
            local_exec_cost(&BTreeMap::new()),
            Err(Error::EmptyNeighborhood)
        ));
    }

    #[test]
    fn reward_is_the_cost_reduction() {
        let costs = |v: &[f64]| -> BTreeMap<Rank, f64> { v.iter().copied().enumerate().collect() };
        let same = costs(&[5.0, 4.0]);
        assert_eq!(reward(&same, &same).unwrap(), 0.0);
        // Overloading the receiver: (5 + 0.5) − (7 + 2) = −3.5.
        assert_close(
            reward(&costs(&[5.0, 4.0]), &costs(&[3.0, 7.0])).unwrap(),
            -3.5,
            1e-12,
        );
    }

    fn simple_ctx() -> DecisionContext {
        DecisionContext {
            owner: 0,
            block: BlockId(3),
            workload: 2.0,
            friend_workloads: [(0, 8.0), (1, 2.0)].into_iter().collect(),
            rates: TransferRates {
                d_block_send: 0.02,
                d_block_recv: 0.03,
                d_particle_send: 1e-4,
                d_particle_recv: 1e-4,
            },
            incoming_counts: BTreeMap::new(),
            neighbor_owners: BTreeMap::new(),
        }
    }

    #[test]
    fn keep_action_features_are_exactly_zero() {
        let mut ctx = simple_ctx();
        ctx.incoming_counts = [(BlockId(1), 7u64), (BlockId(5), 3u64)]
            .into_iter()
            .collect();
        ctx.neighbor_owners = [(BlockId(1), 0usize), (BlockId(5), 0usize)]
            .into_iter()
            .collect();
        assert_eq!(feature_vector(&ctx, 0), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn donation_features_match_hand_computation() {
        let ctx = simple_ctx();
        let phi = feature_vector(&ctx, 1);
        // Workload gap with the block excluded on both sides: (8−2) − 2 = 4.
        assert_close(phi[0], 4.0, 1e-12);
        assert_close(phi[1], -0.05, 1e-12);
        assert_eq!(phi[2], 0.0);
    }

    #[test]
    fn traffic_feature_scores_flow_origins() {
        let mut ctx = simple_ctx();
        ctx.incoming_counts = [(BlockId(1), 10u64), (BlockId(5), 4u64)]
            .into_iter()
            .collect();
        // Neighbor 1 owned by the target, neighbor 5 by the owner.
        ctx.neighbor_owners = [(BlockId(1), 1usize), (BlockId(5), 0usize)]
            .into_iter()
            .collect();
        let phi = feature_vector(&ctx, 1);
        let unit = 2e-4;
        assert_close(phi[2], 10.0 * unit - 4.0 * unit, 1e-15);
    }

    #[test]
    fn latent_scales_by_reciprocal_workload() {
        assert_close(
            latent([1.0, 1.0, 1.0], [4.0, -0.05, 0.0], 2.0).unwrap(),
            1.975,
            1e-12,
        );
        assert_eq!(latent([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], 5.0).unwrap(), 0.0);
        assert!(matches!(
            latent([1.0, 1.0, 1.0], [1.0, 0.0, 0.0], 0.0),
            Err(Error::ZeroWorkload)
        ));
    }

    #[test]
    fn equal_latents_give_a_uniform_policy() {
        // Equal workloads once the block is excluded make every feature 0.
        let ctx = DecisionContext {
            owner: 0,
            block: BlockId(0),
            workload: 1.0,
            friend_workloads: [(0, 3.0), (1, 2.0), (2, 2.0)].into_iter().collect(),
            rates: zero_rates(),
            incoming_counts: BTreeMap::new(),
            neighbor_owners: BTreeMap::new(),
        };
        let probs = policy([1.0; 3], &ctx).unwrap();
        for &p in probs.values() {
            assert_close(p, 1.0 / 3.0, 1e-12);
        }
    }

    #[test]
    fn known_latent_gap_gives_known_probabilities() {
        // With theta = (1,0,0) and w = 1 the latents are z(keep) = 0 and
        // z(donate) = (W0 − 1) − W1 = ln 3, so the softmax is (1/4, 3/4).
        let ctx = DecisionContext {
            owner: 0,
            block: BlockId(0),
            workload: 1.0,
            friend_workloads: [(0, 1.0 + 3.0f64.ln()), (1, 0.0)].into_iter().collect(),
            rates: zero_rates(),
            incoming_counts: BTreeMap::new(),
            neighbor_owners: BTreeMap::new(),
        };
        let probs = policy([1.0, 0.0, 0.0], &ctx).unwrap();
        assert_close(probs[&0], 0.25, 1e-12);
        assert_close(probs[&1], 0.75, 1e-12);
    }

    #[test]
    fn single_candidate_has_probability_one() {
        let ctx = DecisionContext {
            owner: 0,
            block: BlockId(0),
            workload: 1.0,
            friend_workloads: [(0, 4.0)].into_iter().collect(),
            rates: zero_rates(),
            incoming_counts: BTreeMap::new(),
            neighbor_owners: BTreeMap::new(),
        };
        let probs = policy([1.0; 3], &ctx).unwrap();
        assert_eq!(probs.len(), 1);
        assert_eq!(probs[&0], 1.0);
    }

    #[test]
    fn identical_features_have_zero_gradient() {
        // W0 − w = W1 makes the workload-gap feature equal (0) for both
        // targets; zero rates and no flows zero the other two.
        let ctx = DecisionContext {
            owner: 0,
            block: BlockId(0),
            workload: 1.0,
            friend_workloads: [(0, 3.0), (1, 2.0)].into_iter().collect(),
            rates: zero_rates(),
            incoming_counts: BTreeMap::new(),
            neighbor_owners: BTreeMap::new(),
        };
        let probs = policy([1.0; 3], &ctx).unwrap();
        let grad = log_policy_gradient(&ctx, 1, &probs).unwrap();
        assert_eq!(grad, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn near_deterministic_policy_has_vanishing_gradient() {
        let mut ctx = simple_ctx();
        ctx.friend_workloads = [(0, 1e6), (1, 0.0)].into_iter().collect();
        let probs = policy([1.0; 3], &ctx).unwrap();
        assert!(probs[&1] > 1.0 - 1e-12);
        let grad = log_policy_gradient(&ctx, 1, &probs).unwrap();
        for c in grad {
            assert!(c.abs() < 1e-6, "gradient component {c} should vanish");
        }
    }

    #[test]
    fn update_with_zero_reward_changes_nothing() {
        let mut params = PolicyParams::new(0.01);
        params.sq_grad_avg = [0.5, 0.5, 0.5];
        let before = params.clone();
        update_policy(&mut params, [1.0, -2.0, 3.0], 0.0);
        assert_eq!(params, before);
    }

    #[test]
    fn ascent_moves_weights_with_the_signed_gradient() {
        let mut params = PolicyParams::new(0.01);
        update_policy(&mut params, [1.0, 0.0, -0.5], 2.0);
        assert!(params.theta[0] > 1.0);
        assert_eq!(params.theta[1], 1.0);
        assert!(params.theta[2] < 1.0);
        assert!(params.sq_grad_avg[0] > 0.0);
        // Optimizer state for an untouched component stays zero.
        assert_eq!(params.sq_grad_avg[1], 0.0);
    }

    #[test]
    fn weights_are_clamped_non_negative() {
        let mut params = PolicyParams::new(0.5);
        params.theta = [0.001, 1.0, 1.0];
        update_policy(&mut params, [-1.0, 0.0, 0.0], 1.0);
        assert_eq!(params.theta[0], 0.0);
    }

    #[test]
    fn bandit_learns_to_donate_within_two_hundred_updates() {
        // Frozen two-process scenario. Donating always earns +1, keeping −1.
        // The donate action starts unlikely (p ≈ 0.18) because the block
        // transfer penalty outweighs the small workload gap at theta = 1.
        let ctx = DecisionContext {
            owner: 0,
            block: BlockId(0),
            workload: 1.0,
            friend_workloads: [(0, 3.0), (1, 1.0)].into_iter().collect(),
            rates: TransferRates {
                d_block_send: 1.25,
                d_block_recv: 1.25,
                d_particle_send: 0.0,
                d_particle_recv: 0.0,
            },
            incoming_counts: BTreeMap::new(),
            neighbor_owners: BTreeMap::new(),
        };
        let mut params = PolicyParams::new(0.05);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let initial = policy(params.theta, &ctx).unwrap()[&1];
        assert!(initial < 0.5, "donate must start unfavored, got {initial}");
        let mut final_donate_prob = initial;
        for _ in 0..200 {
            let probs = policy(params.theta, &ctx).unwrap();
            let targets: Vec<Rank> = probs.keys().copied().collect();
            let weights: Vec<f64> = probs.values().copied().collect();
            let dist = rand::distributions::WeightedIndex::new(&weights).unwrap();
            let chosen = targets[dist.sample(&mut rng)];
            let r = if chosen == 1 { 1.0 } else { -1.0 };
            let grad = log_policy_gradient(&ctx, chosen, &probs).unwrap();
            update_policy(&mut params, grad, r);
            final_donate_prob = policy(params.theta, &ctx).unwrap()[&1];
        }
        assert!(
            final_donate_prob > 0.9,
            "donate probability only reached {final_donate_prob}"
        );
    }

    fn arb_ctx() -> impl Strategy<Value = DecisionContext> {
        (
            proptest::collection::vec(0.1f64..10.0, 3),
            0.1f64..5.0,
            proptest::collection::vec((0u64..20, 0usize..3), 2),
            0.0f64..0.1,
            0.0f64..0.1,
            0.0f64..1e-3,
            0.0f64..1e-3,
        )
            .prop_map(|(w, wi, neigh, dbs, dbr, dps, dpr)| {
                let friend_workloads: BTreeMap<Rank, f64> = w.into_iter().enumerate().collect();
                let mut incoming_counts = BTreeMap::new();
                let mut neighbor_owners = BTreeMap::new();
                for (k, (count, owner)) in neigh.into_iter().enumerate() {
                    let j = BlockId(10 + k);
                    incoming_counts.insert(j, count);
                    neighbor_owners.insert(j, owner);
                }
                DecisionContext {
                    owner: 0,
                    block: BlockId(0),
                    workload: wi,
                    friend_workloads,
                    rates: TransferRates {
                        d_block_send: dbs,
                        d_block_recv: dbr,
                        d_particle_send: dps,
                        d_particle_recv: dpr,
                    },
                    incoming_counts,
                    neighbor_owners,
                }
            })
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(ctx in arb_ctx(), theta in proptest::collection::vec(0.0f64..5.0, 3)) {
            let theta = [theta[0], theta[1], theta[2]];
            let probs = policy(theta, &ctx).unwrap();
            let total: f64 = probs.values().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(probs.values().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn latent_scale_preserves_the_probability_ordering(ctx in arb_ctx(), scale in 0.1f64..10.0) {
            // Grow the block workload while keeping the owner's
            // block-excluded workload fixed: every feature is unchanged and
            // all latents shrink by the same positive factor, which must not
            // reorder the policy.
            let theta = [1.0, 1.0, 1.0];
            let base = policy(theta, &ctx).unwrap();
            let mut scaled_ctx = ctx.clone();
            let delta = ctx.workload * scale - ctx.workload;
            scaled_ctx.workload += delta;
            *scaled_ctx.friend_workloads.get_mut(&scaled_ctx.owner).unwrap() += delta;
            let probs = policy(theta, &scaled_ctx).unwrap();
            let ranks: Vec<Rank> = base.keys().copied().collect();
            for &a in &ranks {
                for &b in &ranks {
                    if base[&a] > base[&b] + 1e-9 {
                        prop_assert!(
                            probs[&a] >= probs[&b] - 1e-12,
                            "rank {} outranked {} before scaling but not after",
                            a, b
                        );
                    }
                }
            }
        }

        #[test]
        fn analytic_gradient_matches_finite_differences(
            ctx in arb_ctx(),
            theta in proptest::collection::vec(0.05f64..3.0, 3),
            pick in 0usize..3,
        ) {
            let theta = [theta[0], theta[1], theta[2]];
            let candidates = ctx.candidates();
            let target = candidates[pick % candidates.len()];
            let probs = policy(theta, &ctx).unwrap();
            let analytic = log_policy_gradient(&ctx, target, &probs).unwrap();
            let h = 1e-5;
            for c in 0..3 {
                let mut plus = theta;
                plus[c] += h;
                let mut minus = theta;
                minus[c] -= h;
                let lp = policy(plus, &ctx).unwrap()[&target].ln();
                let lm = policy(minus, &ctx).unwrap()[&target].ln();
                let fd = (lp - lm) / (2.0 * h);
                prop_assert!(
                    (analytic[c] - fd).abs() < 1e-6,
                    "component {}: analytic {} vs finite difference {}",
                    c, analytic[c], fd
                );
            }
        }

        #[test]
        fn theta_stays_non_negative_after_updates(
            grads in proptest::collection::vec(
                (proptest::collection::vec(-3.0f64..3.0, 3), -5.0f64..5.0),
                1..30,
            ),
        ) {
            let mut params = PolicyParams::new(0.05);
            for (g, r) in grads {
                update_policy(&mut params, [g[0], g[1], g[2]], r);
                prop_assert!(params.theta.iter().all(|&t| t >= 0.0));
            }
        }
    }
}
