//! Per-block trajectory statistics and next-round workload estimation.
//!
//! Each block keeps a depth-`r` tree over the predecessor paths of particles
//! that finished advection inside it. A node at path `(p₁, …, p_k)` (most
//! recent predecessor first) stores how many particles arrived along that
//! path and their mean step count inside the block. Given counts of
//! particles about to enter the block, grouped by the same paths, the tree
//! predicts the block's advection seconds for the next round; unseen paths
//! fall back to the deepest recorded ancestor group.

use std::collections::BTreeMap;

use crate::domain_decomp::BlockId;
use crate::error::{Error, Result};

/// A predecessor path: the last `r` blocks a particle exited, most recent
/// first, padded with the seeding block when shorter.
pub type TrajectoryPath = Vec<BlockId>;

#[derive(Debug, Clone, Default, PartialEq)]
struct TreeNode {
    n: u64,
    omega: f64,
    children: BTreeMap<BlockId, TreeNode>,
}

/// Trajectory statistics of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoriesTree {
    root_block: BlockId,
    order: usize,
    root: TreeNode,
    dirty: bool,
}

impl TrajectoriesTree {
    /// An empty tree of the given order for `root_block`.
    #[must_use]
    pub fn new(root_block: BlockId, order: usize) -> Self {
        Self {
            root_block,
            order,
            root: TreeNode::default(),
            dirty: false,
        }
    }

    #[must_use]
    pub fn root_block(&self) -> BlockId {
        self.root_block
    }

    #[must_use]
    pub fn order(&self) -> usize {
        self.order
    }

    /// Whether no particle has been recorded yet.
    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.root.n == 0
    }

    /// Number of stored nodes, including the root.
    #[must_use]
    pub fn node_count(&self) -> usize {
        fn count(node: &TreeNode) -> usize {
            1 + node.children.values().map(count).sum::<usize>()
        }
        count(&self.root)
    }

    /// Folds one finished particle into the leaf for `path`.
    ///
    /// `path` must have length `order` (seed-padded by the caller). The leaf
    /// keeps an exact running mean of step counts; interior aggregates stay
    /// stale until [`Self::aggregate`] runs.
    pub fn record_advection(&mut self, path: &[BlockId], steps: u64) {
        debug_assert_eq!(
            path.len(),
            self.order,
            "path length must equal the tree order"
        );
        let mut node = &mut self.root;
        for &b in path {
            node = node.children.entry(b).or_default();
        }
        node.n += 1;
        node.omega += (steps as f64 - node.omega) / node.n as f64;
        if self.order > 0 {
            self.dirty = true;
        }
    }

    /// Recomputes every interior node bottom-up: counts are summed and mean
    /// steps are count-weighted means of the children.
    pub fn aggregate(&mut self) {
        fn agg(node: &mut TreeNode) {
            if node.children.is_empty() {
                return;
            }
            let mut n = 0u64;
            let mut weighted = 0.0;
            for child in node.children.values_mut() {
                agg(child);
                n += child.n;
                weighted += child.n as f64 * child.omega;
            }
            node.n = n;
            node.omega = if n == 0 { 0.0 } else { weighted / n as f64 };
        }
        agg(&mut self.root);
        self.dirty = false;
    }

    /// Predicted advection seconds for this block next round.
    ///
    /// `incoming` maps length-`order` predecessor paths to counts of
    /// particles about to enter the block. Each group contributes
    /// `count · d_a · ω*`, where `ω*` is the mean step count at the deepest
    /// stored node matching a prefix of the path; with no depth-1 match this
    /// is the root's overall mean, and an empty tree predicts zero.
    #[must_use]
    pub fn estimate(&self, incoming: &BTreeMap<TrajectoryPath, u64>, d_a: f64) -> f64 {
        debug_assert!(!self.dirty, "aggregate() must run before estimate()");
        let mut w = 0.0;
        for (path, &count) in incoming {
            debug_assert_eq!(path.len(), self.order);
            let mut node = &self.root;
            for b in path {
                match node.children.get(b) {
                    Some(child) => node = child,
                    None => break,
                }
            }
            w += count as f64 * d_a * node.omega;
        }
        w
    }

    /// Verifies the aggregation identities on every interior node.
    pub fn check_aggregates(&self, tol: f64) -> Result<()> {
        fn check(node: &TreeNode, tol: f64) -> Result<()> {
            if node.children.is_empty() {
                return Ok(());
            }
            let n: u64 = node.children.values().map(|c| c.n).sum();
            let weighted: f64 = node.children.values().map(|c| c.n as f64 * c.omega).sum();
            let omega = if n == 0 { 0.0 } else { weighted / n as f64 };
            if node.n != n {
                return Err(Error::InvariantViolation(format!(
                    "interior count {} != children sum {n}",
                    node.n
                )));
            }
            let scale = omega.abs().max(1.0);
            if (node.omega - omega).abs() > tol * scale {
                return Err(Error::InvariantViolation(format!(
                    "interior mean {} != weighted child mean {omega}",
                    node.omega
                )));
            }
            node.children.values().try_for_each(|c| check(c, tol))
        }
        check(&self.root, tol)
    }
}

const TREE_MAGIC: &[u8; 4] = b"FBTT";
const TREE_VERSION: u8 = 1;

/// Encodes a tree into the versioned binary wire format used by simulated
/// block transfers.
#[must_use]
pub fn serialize_tree(tree: &TrajectoriesTree) -> Vec<u8> {
    fn write_node(node: &TreeNode, out: &mut Vec<u8>) {
        out.extend_from_slice(&node.n.to_le_bytes());
        out.extend_from_slice(&node.omega.to_le_bytes());
        out.extend_from_slice(&(node.children.len() as u32).to_le_bytes());
        for (&b, child) in &node.children {
            out.extend_from_slice(&(b.0 as u64).to_le_bytes());
            write_node(child, out);
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(TREE_MAGIC);
    out.push(TREE_VERSION);
    out.extend_from_slice(&(tree.root_block.0 as u64).to_le_bytes());
    out.push(tree.order as u8);
    write_node(&tree.root, &mut out);
    out
}

/// Decodes a tree previously produced by [`serialize_tree`].
pub fn deserialize_tree(bytes: &[u8]) -> Result<TrajectoriesTree> {
    struct Reader<'a> {
        bytes: &'a [u8],
        at: usize,
    }
    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
            let end = end.ok_or_else(|| Error::MalformedTree("truncated input".into()))?;
            let s = &self.bytes[self.at..end];
            self.at = end;
            Ok(s)
        }
        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn f64(&mut self) -> Result<f64> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
        fn u8(&mut self) -> Result<u8> {
            Ok(self.take(1)?[0])
        }
    }

    fn read_node(r: &mut Reader<'_>, depth_left: usize) -> Result<TreeNode> {
        let n = r.u64()?;
        let omega = r.f64()?;
        if !omega.is_finite() || omega < 0.0 {
            return Err(Error::MalformedTree(format!(
                "invalid mean step count {omega}"
            )));
        }
        let child_count = r.u32()?;
        if child_count > 0 && depth_left == 0 {
            return Err(Error::MalformedTree(
                "node deeper than the stated order".into(),
            ));
        }
        let mut children = BTreeMap::new();
        let mut last: Option<u64> = None;
        for _ in 0..child_count {
            let b = r.u64()?;
            if last.is_some_and(|p| p >= b) {
                return Err(Error::MalformedTree(
                    "child ids not strictly ascending".into(),
                ));
            }
            last = Some(b);
            children.insert(BlockId(b as usize), read_node(r, depth_left - 1)?);
        }
        Ok(TreeNode { n, omega, children })
    }

    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != TREE_MAGIC {
        return Err(Error::MalformedTree("bad magic".into()));
    }
    let version = r.u8()?;
    if version != TREE_VERSION {
        return Err(Error::MalformedTree(format!(
            "unsupported version {version}"
        )));
    }
    let root_block = BlockId(r.u64()? as usize);
    let order = r.u8()? as usize;
    let root = read_node(&mut r, order)?;
    if r.at != bytes.len() {
        return Err(Error::MalformedTree("trailing bytes".into()));
    }
    Ok(TrajectoriesTree {
        root_block,
        order,
        root,
        dirty: false,
    })
}

/// Counts of particles about to enter each block, grouped by predecessor
/// path, as exchanged between processes ahead of workload estimation.
#[derive(Debug, Clone, Default)]
pub struct IncomingCounts {
    per_block: BTreeMap<BlockId, BTreeMap<TrajectoryPath, u64>>,
}

impl IncomingCounts {
    #[must_use]
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `count` particles entering `dest` along `path`.
    pub fn add(&mut self, dest: BlockId, path: TrajectoryPath, count: u64) {
        *self
            .per_block
            .entry(dest)
            .or_default()
            .entry(path)
            .or_insert(0) += count;
    }

    /// Path groups for one destination block.
    #[must_use]
    pub fn for_block(&self, b: BlockId) -> Option<&BTreeMap<TrajectoryPath, u64>> {
        self.per_block.get(&b)
    }

    /// Total particles headed into `b`.
    #[must_use]
    pub fn total_into(&self, b: BlockId) -> u64 {
        self.for_block(b).map_or(0, |m| m.values().sum())
    }

    /// Destination blocks with at least one incoming particle, ascending.
    pub fn blocks(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.per_block.keys().copied()
    }
}

/// Running estimate of a process's seconds-per-advection-step rate.
#[derive(Debug, Clone, Copy, Default)]
pub struct AdvectionRateTracker {
    total_steps: u64,
    total_seconds: f64,
}

impl AdvectionRateTracker {
    pub fn record(&mut self, steps: u64, seconds: f64) {
        self.total_steps += steps;
        self.total_seconds += seconds;
    }

    /// Historical seconds per advection step; zero before any work.
    #[must_use]
    pub fn d_a(&self) -> f64 {
        self.total_seconds / self.total_steps.max(1) as f64
    }
}

/// Workload estimation error: `Σ|wᵢ − aᵢ| / Σ aᵢ` over the union of the two
/// key sets, with missing entries treated as zero.
pub fn relative_error(
    estimates: &BTreeMap<BlockId, f64>,
    actuals: &BTreeMap<BlockId, f64>,
) -> Result<f64> {
    let total: f64 = actuals.values().sum();
    if total <= 0.0 {
        return Err(Error::DivideByZero);
    }
    let mut sum = 0.0;
    for (&b, &w) in estimates {
        sum += (w - actuals.get(&b).copied().unwrap_or(0.0)).abs();
    }
    for (&b, &a) in actuals {
        if !estimates.contains_key(&b) {
            sum += a.abs();
        }
    }
    Ok(sum / total)
}
