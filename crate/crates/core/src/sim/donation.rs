//! Donation-protocol arbitration and model-based rewards.
//!
//! Each round, overloaded processes (donors) may ask a friend to take one
//! block. Receivers answer all requests in a deterministic order under two
//! rules: taking the block must not push the receiver's workload above the
//! donor's, and the receiver must have block capacity left. Donors score
//! their action against the receiver's feedback — the workload the receiver
//! would have if every request were accepted — so even rejected requests
//! produce a usable training signal.

use std::collections::BTreeMap;

use crate::agent::{self, DecisionContext};
use crate::domain_decomp::{friend_set, BlockId, Rank};
use crate::error::Result;

/// A donor's offer of one block to one receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DonationRequest {
    pub donor: Rank,
    pub block: BlockId,
    /// Estimated advection seconds of the offered block.
    pub workload: f64,
    /// The donor's total estimated advection seconds.
    pub donor_total: f64,
}

/// Why a receiver declined a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// Accepting would leave the receiver busier than the donor.
    WouldExceedDonor,
    /// The receiver has no block capacity left.
    Capacity,
}

/// A receiver's answer to one request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DonationDecision {
    pub request: DonationRequest,
    pub accepted: bool,
    pub reason: Option<RejectReason>,
}

/// Ranks whose estimated workload exceeds the mean over their friend set
/// (including themselves). `workloads` must cover ranks `0..n_p`.
#[must_use]
pub fn select_donors(workloads: &BTreeMap<Rank, f64>) -> Vec<Rank> {
    let n_p = workloads.len();
    let mut donors = Vec::new();
    for (&l, &w) in workloads {
        let friends = friend_set(l, n_p);
        let mut sum = w;
        for f in &friends {
            sum += workloads.get(f).copied().unwrap_or(0.0);
        }
        let mean = sum / (friends.len() + 1) as f64;
        if w > mean {
            donors.push(l);
        }
    }
    donors
}

/// The donation target a greedy donor picks: its lowest-workload friend,
/// ties broken toward the lower rank. `None` when the donor has no friends.
#[must_use]
pub fn greedy_target(owner: Rank, workloads: &BTreeMap<Rank, f64>) -> Option<Rank> {
    friend_set(owner, workloads.len())
        .into_iter()
        .map(|f| (f, workloads.get(&f).copied().unwrap_or(0.0)))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
        .map(|(f, _)| f)
}

/// The workload a receiver reports back to donors: its own estimate plus
/// every requested donation, before any rejection.
#[must_use]
pub fn feedback(receiver_workload: f64, requests: &[DonationRequest]) -> f64 {
    receiver_workload + requests.iter().map(|r| r.workload).sum::<f64>()
}

/// Answers all requests aimed at one receiver.
///
/// `requests` must be sorted by ascending donor rank; answers come back in
/// the same order. A request is accepted when the receiver's workload after
/// everything accepted so far plus this block stays at or below the donor's
/// workload after giving the block away, and a block slot is free.
#[must_use]
pub fn resolve_requests(
    receiver_workload: f64,
    resident_blocks: usize,
    capacity: usize,
    requests: &[DonationRequest],
) -> Vec<DonationDecision> {
    debug_assert!(requests.windows(2).all(|w| w[0].donor <= w[1].donor));
    let mut accepted_w = 0.0;
    let mut accepted_n = 0usize;
    let mut decisions = Vec::with_capacity(requests.len());
    for &request in requests {
        let receiver_after = receiver_workload + accepted_w + request.workload;
        let donor_after = request.donor_total - request.workload;
        let (accepted, reason) = if receiver_after > donor_after {
            (false, Some(RejectReason::WouldExceedDonor))
        } else if resident_blocks + accepted_n + 1 > capacity {
            (false, Some(RejectReason::Capacity))
        } else {
            (true, None)
        };
        if accepted {
            accepted_w += request.workload;
            accepted_n += 1;
        }
        decisions.push(DonationDecision {
            request,
            accepted,
            reason,
        });
    }
    decisions
}

/// Block and particle transfer costs a donation adds to each side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferDeltas {
    pub donor: f64,
    pub receiver: f64,
}

/// Cost changes caused by moving `ctx.block` from its owner to `target`,
/// computed from the block's expected incoming particle traffic.
///
/// The donor pays the block send, starts paying sends for arrivals that
/// originate at its remaining blocks, and stops paying receives for
/// arrivals from elsewhere. The receiver pays the block receive, stops
/// paying sends for arrivals from its own blocks, and starts paying
/// receives for the rest.
#[must_use]
pub fn transfer_deltas(ctx: &DecisionContext, target: Rank) -> TransferDeltas {
    let dps = ctx.rates.d_particle_send;
    let dpr = ctx.rates.d_particle_recv;
    let mut donor = ctx.rates.d_block_send;
    let mut receiver = ctx.rates.d_block_recv;
    for (j, &count) in &ctx.incoming_counts {
        let Some(&owner_of_j) = ctx.neighbor_owners.get(j) else {
            continue;
        };
        let c = count as f64;
        if owner_of_j == ctx.owner {
            donor += c * dps;
        } else {
            donor -= c * dpr;
        }
        if owner_of_j == target {
            receiver -= c * dps;
        } else {
            receiver += c * dpr;
        }
    }
    TransferDeltas { donor, receiver }
}

/// Model-based reward of donating `ctx.block` to `target`, given the
/// receiver's feedback workload.
///
/// Both neighborhood snapshots use the exchanged workloads; only the donor
/// and receiver entries change, by the donated workload and the transfer
/// deltas. The reward is positive when the hypothetical move lowers the
/// donor's neighborhood execution cost.
pub fn donation_reward(ctx: &DecisionContext, target: Rank, feedback_workload: f64) -> Result<f64> {
    let deltas = transfer_deltas(ctx, target);
    let before = &ctx.friend_workloads;
    let mut after = before.clone();
    if let Some(w) = after.get_mut(&ctx.owner) {
        *w = *w - ctx.workload + deltas.donor;
    }
    after.insert(target, feedback_workload + deltas.receiver);
    agent::reward(before, &after)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::TransferRates;
    use crate::testutil::assert_close;

    fn workloads(values: &[f64]) -> BTreeMap<Rank, f64> {
        values.iter().copied().enumerate().collect()
    }

    #[test]
    fn balanced_processes_produce_no_donors() {
        assert!(select_donors(&workloads(&[4.0, 4.0, 4.0, 4.0])).is_empty());
    }

    #[test]
    fn overloaded_rank_becomes_a_donor() {
        // friend_set(0) = {1}: mean over {0, 1} is 4, so only rank 0 donates.
        assert_eq!(select_donors(&workloads(&[8.0, 0.0])), vec![0]);
        // Rank 2 towers over both of its friends.
        let donors = select_donors(&workloads(&[1.0, 1.0, 10.0, 1.0]));
        assert_eq!(donors, vec![2]);
    }

    #[test]
    fn greedy_picks_the_least_loaded_friend() {
        // friend_set(0) = {1, 2} for four ranks.
        assert_eq!(greedy_target(0, &workloads(&[9.0, 3.0, 1.0, 5.0])), Some(2));
        // Tie between friends 1 and 2 goes to the lower rank.
        assert_eq!(greedy_target(0, &workloads(&[9.0, 2.0, 2.0, 5.0])), Some(1));
        // A single process has no friends.
        assert_eq!(greedy_target(0, &workloads(&[9.0])), None);
    }

    fn request(donor: Rank, w: f64, donor_total: f64) -> DonationRequest {
        DonationRequest {
            donor,
            block: BlockId(donor * 10),
            workload: w,
            donor_total,
        }
    }

    #[test]
    fn feedback_assumes_every_request_lands() {
        let reqs = [request(0, 2.0, 8.0), request(1, 3.0, 9.0)];
        assert_close(feedback(1.0, &reqs), 6.0, 1e-15);
        assert_eq!(feedback(1.0, &[]), 1.0);
    }

    #[test]
    fn acceptance_allows_exact_balance() {
        // Receiver at 0 taking w=4 from a donor at 8 lands both at 4.
        let d = resolve_requests(0.0, 1, 8, &[request(0, 4.0, 8.0)]);
        assert!(d[0].accepted);
    }

    #[test]
    fn overloading_requests_are_rejected() {
        // Taking w=3 would put the receiver at 7 versus the donor's 5.
        let d = resolve_requests(4.0, 1, 8, &[request(0, 3.0, 8.0)]);
        assert!(!d[0].accepted);
        assert_eq!(d[0].reason, Some(RejectReason::WouldExceedDonor));
    }

    #[test]
    fn capacity_rejects_the_higher_ranked_donor() {
        // Both donations fit by workload, but only one block slot is free.
        let reqs = [request(0, 1.0, 10.0), request(2, 1.0, 10.0)];
        let d = resolve_requests(0.0, 3, 4, &reqs);
        assert!(d[0].accepted);
        assert!(!d[1].accepted);
        assert_eq!(d[1].reason, Some(RejectReason::Capacity));
    }

    #[test]
    fn earlier_acceptances_count_against_later_requests() {
        // After accepting w=3 the receiver sits at 3; taking the second
        // w=3 would reach 6 versus that donor's remaining 4.
        let reqs = [request(0, 3.0, 9.0), request(1, 3.0, 7.0)];
        let d = resolve_requests(0.0, 1, 8, &reqs);
        assert!(d[0].accepted);
        assert!(!d[1].accepted);
        assert_eq!(d[1].reason, Some(RejectReason::WouldExceedDonor));
    }

    fn ctx_with_flows() -> DecisionContext {
        DecisionContext {
            owner: 0,
            block: BlockId(5),
            workload: 2.0,
            friend_workloads: [(0, 8.0), (1, 0.0)].into_iter().collect(),
            rates: TransferRates {
                d_block_send: 0.02,
                d_block_recv: 0.03,
                d_particle_send: 1e-4,
                d_particle_recv: 2e-4,
            },
            // Block 6 (donor-owned) sends 10 particles into the block;
            // block 7 (target-owned) sends 4.
            incoming_counts: [(BlockId(6), 10u64), (BlockId(7), 4u64)]
                .into_iter()
                .collect(),
            neighbor_owners: [(BlockId(6), 0usize), (BlockId(7), 1usize)]
                .into_iter()
                .collect(),
        }
    }

    #[test]
    fn transfer_deltas_match_hand_computation() {
        let d = transfer_deltas(&ctx_with_flows(), 1);
        // Donor: block send + new sends from block 6 − dropped receives from 7.
        assert_close(d.donor, 0.02 + 10.0 * 1e-4 - 4.0 * 2e-4, 1e-12);
        // Receiver: block receive − dropped sends from 7 + new receives from 6.
        assert_close(d.receiver, 0.03 - 4.0 * 1e-4 + 10.0 * 2e-4, 1e-12);
    }

    #[test]
    fn halving_donation_earns_the_full_cost_drop() {
        let mut ctx = ctx_with_flows();
        ctx.workload = 4.0;
        ctx.incoming_counts.clear();
        ctx.neighbor_owners.clear();
        ctx.rates = TransferRates {
            d_block_send: 0.0,
            d_block_recv: 0.0,
            d_particle_send: 0.0,
            d_particle_recv: 0.0,
        };
        // {8, 0} with the only request being this one: feedback = 0 + 4.
        // Costs go from max 8 + spread 4 to a flat {4, 4}.
        let r = donation_reward(&ctx, 1, 4.0).unwrap();
        assert_close(r, 8.0, 1e-12);
    }

    #[test]
    fn overloading_the_receiver_is_penalized() {
        let ctx = DecisionContext {
            owner: 0,
            block: BlockId(1),
            workload: 2.0,
            friend_workloads: [(0, 5.0), (1, 4.0)].into_iter().collect(),
            rates: TransferRates {
                d_block_send: 0.0,
                d_block_recv: 0.0,
                d_particle_send: 0.0,
                d_particle_recv: 0.0,
            },
            incoming_counts: BTreeMap::new(),
            neighbor_owners: BTreeMap::new(),
        };
        // Receiver already promised 6 − 4 = 2 from elsewhere plus this 2.
        let r = donation_reward(&ctx, 1, 6.0).unwrap();
        // Before: max 5 + spread 0.5; after {3, 6}: max 6 + spread 1.5.
        assert_close(r, 5.5 - 7.5, 1e-12);
    }
}
