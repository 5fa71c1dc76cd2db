//! Block decomposition of a field domain, block adjacency, ownership, and
//! the hypercube friend topology used for workload exchange.
//!
//! The domain is split into a regular grid of blocks: near-equal intervals
//! per spatial axis, plus an optional time axis for unsteady fields. Block
//! indices run x-fastest, then y, z, and time.

use crate::error::{Error, Result};
use crate::space::{Aabb, Point3};

/// A simulated process index.
pub type Rank = usize;

/// Identifier of one block of the decomposition. The index maps bijectively
/// to per-axis grid coordinates (x-fastest ordering).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(pub usize);

impl std::fmt::Display for BlockId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One block: its id, spatial/time bounds, and ghost width in cells.
#[derive(Debug, Clone)]
pub struct Block {
    pub id: BlockId,
    /// Non-ghost bounds; exits are detected against these.
    pub bounds: Aabb,
    /// Ghost-layer width in cells around the non-ghost bounds.
    pub ghost_width: usize,
}

/// A regular block decomposition of a domain.
#[derive(Debug, Clone)]
pub struct Decomposition {
    domain: Aabb,
    dim: usize,
    /// Blocks per axis: `[x, y, z, time]`; unused axes hold 1.
    counts: [usize; 4],
    /// Per spatial axis, the `counts[a] + 1` interval boundaries.
    boundaries: [Vec<f64>; 3],
    /// Time interval boundaries when the time axis is split, else empty.
    time_boundaries: Vec<f64>,
    ghost_width: usize,
}

/// Splits `domain` into a regular grid of blocks.
///
/// `spatial_blocks` must provide one count per spatial axis of the domain.
/// `time_blocks > 1` additionally splits the given finite `time_range`, which
/// is then required. Per-axis block extents differ only by rounding.
pub fn decompose(
    domain: Aabb,
    spatial_blocks: &[usize],
    time_blocks: usize,
    time_range: Option<(f64, f64)>,
    ghost_width: usize,
) -> Result<Decomposition> {
    if spatial_blocks.len() != domain.dim {
        return Err(Error::InvalidConfig(format!(
            "{} block counts given for a {}-dimensional domain",
            spatial_blocks.len(),
            domain.dim
        )));
    }
    if spatial_blocks.contains(&0) || time_blocks == 0 {
        return Err(Error::InvalidConfig("block counts must be positive".into()));
    }
    for a in 0..domain.dim {
        if domain.min[a].is_nan() || domain.max[a].is_nan() || domain.min[a] >= domain.max[a] {
            return Err(Error::InvalidConfig(format!(
                "degenerate domain on axis {a}"
            )));
        }
    }
    let mut counts = [1usize; 4];
    counts[..domain.dim].copy_from_slice(spatial_blocks);
    counts[3] = time_blocks;

    let mut boundaries: [Vec<f64>; 3] = Default::default();
    for a in 0..3 {
        boundaries[a] = if a < domain.dim {
            split_interval(domain.min[a], domain.max[a], counts[a])
        } else {
            vec![0.0, 0.0]
        };
    }
    let time_boundaries = if time_blocks > 1 {
        let (t0, t1) = time_range.ok_or_else(|| {
            Error::InvalidConfig("splitting the time axis requires a finite time range".into())
        })?;
        if t0.is_nan() || t1.is_nan() || t0 >= t1 {
            return Err(Error::InvalidConfig("degenerate time range".into()));
        }
        split_interval(t0, t1, time_blocks)
    } else {
        Vec::new()
    };

    Ok(Decomposition {
        domain,
        dim: domain.dim,
        counts,
        boundaries,
        time_boundaries,
        ghost_width,
    })
}

/// Near-equal split of `[lo, hi]` into `k` intervals; endpoints exact.
fn split_interval(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    let mut b: Vec<f64> = (0..=k)
        .map(|i| lo + (hi - lo) * i as f64 / k as f64)
        .collect();
    b[0] = lo;
    b[k] = hi;
    b
}

impl Decomposition {
    /// Total number of blocks.
    #[must_use]
    pub fn n_blocks(&self) -> usize {
        self.counts.iter().product()
    }

    /// Blocks per axis as `[x, y, z, time]`.
    #[must_use]
    pub fn counts(&self) -> [usize; 4] {
        self.counts
    }

    /// The decomposed domain.
    #[must_use]
    pub fn domain(&self) -> Aabb {
        self.domain
    }

    /// Grid coordinates of a block id (x-fastest layout).
    #[must_use]
    pub fn grid_coords(&self, id: BlockId) -> [usize; 4] {
        let [nx, ny, nz, _] = self.counts;
        let i = id.0;
        [
            i % nx,
            (i / nx) % ny,
            (i / (nx * ny)) % nz,
            i / (nx * ny * nz),
        ]
    }

    /// Block id of grid coordinates (inverse of [`Self::grid_coords`]).
    #[must_use]
    pub fn block_at(&self, coords: [usize; 4]) -> BlockId {
        let [nx, ny, nz, _] = self.counts;
        BlockId(coords[0] + nx * (coords[1] + ny * (coords[2] + nz * coords[3])))
    }

    /// The block with the given id.
    #[must_use]
    pub fn block(&self, id: BlockId) -> Block {
        let c = self.grid_coords(id);
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for a in 0..self.dim {
            min[a] = self.boundaries[a][c[a]];
            max[a] = self.boundaries[a][c[a] + 1];
        }
        let time = if self.counts[3] > 1 {
            (self.time_boundaries[c[3]], self.time_boundaries[c[3] + 1])
        } else {
            (f64::NEG_INFINITY, f64::INFINITY)
        };
        Block {
            id,
            bounds: Aabb {
                min,
                max,
                dim: self.dim,
                time,
            },
            ghost_width: self.ghost_width,
        }
    }

    /// The unique block containing `(p, t)`.
    ///
    /// Interior faces resolve to the lower-indexed block; the domain minimum
    /// belongs to the first block on each axis. Errors with
    /// [`Error::OutOfDomain`] when the point lies outside the domain or, for
    /// a split time axis, outside the time range.
    pub fn locate_block(&self, p: Point3, t: f64) -> Result<BlockId> {
        if !self.domain.contains(p) {
            return Err(Error::OutOfDomain(p));
        }
        let mut coords = [0usize; 4];
        for a in 0..self.dim {
            coords[a] = lower_biased_interval(&self.boundaries[a], p[a]);
        }
        if self.counts[3] > 1 {
            let tb = &self.time_boundaries;
            if t < tb[0] || t > tb[tb.len() - 1] {
                return Err(Error::OutOfDomain(p));
            }
            coords[3] = lower_biased_interval(tb, t);
        }
        Ok(self.block_at(coords))
    }

    /// All blocks adjacent to `id`, including diagonals, across every split
    /// axis. Sorted ascending; never contains `id` itself.
    #[must_use]
    pub fn block_neighbors(&self, id: BlockId) -> Vec<BlockId> {
        let c = self.grid_coords(id);
        let mut out = Vec::new();
        let deltas = [-1isize, 0, 1];
        for &dt in &deltas {
            for &dz in &deltas {
                for &dy in &deltas {
                    for &dx in &deltas {
                        if dx == 0 && dy == 0 && dz == 0 && dt == 0 {
                            continue;
                        }
                        let offs = [dx, dy, dz, dt];
                        let mut n = [0usize; 4];
                        let mut ok = true;
                        for a in 0..4 {
                            let v = c[a] as isize + offs[a];
                            if v < 0 || v >= self.counts[a] as isize {
                                ok = false;
                                break;
                            }
                            n[a] = v as usize;
                        }
                        if ok {
                            out.push(self.block_at(n));
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Index of the interval of `boundaries` containing `x`, biased so that a
/// value exactly on an interior boundary falls in the lower interval.
fn lower_biased_interval(boundaries: &[f64], x: f64) -> usize {
    let interior = &boundaries[1..boundaries.len() - 1];
    interior.partition_point(|&b| b < x)
}

/// The friend set of rank `l` among `n_p` processes: all ranks reachable by
/// flipping a single bit of `l`, kept in bit order.
///
/// Friendship is symmetric and every rank of a multi-process run has at
/// least one friend. A single-process run has none.
#[must_use]
pub fn friend_set(l: Rank, n_p: usize) -> Vec<Rank> {
    debug_assert!(l < n_p, "rank {l} out of range for {n_p} processes");
    let mut out = Vec::new();
    let mut bit = 1usize;
    while bit < n_p {
        let m = l ^ bit;
        if m < n_p {
            out.push(m);
        }
        bit <<= 1;
    }
    out
}

/// Which rank owns each block. The owner vector always partitions the block
/// set; `epoch` counts ownership adjustments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockAssignment {
    owner: Vec<Rank>,
    pub epoch: u64,
}

/// Assigns `n_blocks` blocks to `n_p` processes block-cyclically
/// (`owner(i) = i mod n_p`) at epoch 0.
pub fn round_robin_assign(n_blocks: usize, n_p: usize) -> Result<BlockAssignment> {
    if n_p == 0 {
        return Err(Error::InvalidConfig(
            "at least one process is required".into(),
        ));
    }
    if n_blocks < n_p {
        return Err(Error::TooFewBlocks {
            blocks: n_blocks,
            processes: n_p,
        });
    }
    Ok(BlockAssignment {
        owner: (0..n_blocks).map(|i| i % n_p).collect(),
        epoch: 0,
    })
}

impl BlockAssignment {
    #[must_use]
    pub fn n_blocks(&self) -> usize {
        self.owner.len()
    }

    #[must_use]
    pub fn owner_of(&self, id: BlockId) -> Rank {
        self.owner[id.0]
    }

    /// Reassigns one block. The caller bumps `epoch` once per adjustment
    /// round.
    pub fn set_owner(&mut self, id: BlockId, rank: Rank) {
        self.owner[id.0] = rank;
    }

    /// Blocks owned by `rank`, ascending.
    #[must_use]
    pub fn blocks_of(&self, rank: Rank) -> Vec<BlockId> {
        self.owner
            .iter()
            .enumerate()
            .filter(|&(_, &o)| o == rank)
            .map(|(i, _)| BlockId(i))
            .collect()
    }

    /// Number of blocks resident on `rank`.
    #[must_use]
    pub fn count_of(&self, rank: Rank) -> usize {
        self.owner.iter().filter(|&&o| o == rank).count()
    }

    /// Checks that every owner is a valid rank.
    pub fn validate(&self, n_p: usize) -> Result<()> {
        for (i, &o) in self.owner.iter().enumerate() {
            if o >= n_p {
                return Err(Error::InvariantViolation(format!(
                    "block {i} owned by rank {o}, but only {n_p} processes exist"
                )));
            }
        }
        Ok(())
    }
}
