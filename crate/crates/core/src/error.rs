//! Crate-wide error type.

use crate::comm::TransferKind;
use crate::space::Point3;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A position was evaluated or located outside the field domain.
    #[error("position ({:.6}, {:.6}, {:.6}) is outside the field domain", .0[0], .0[1], .0[2])]
    OutOfDomain(Point3),
    /// A time was evaluated outside the sampled time range of an unsteady grid.
    #[error("time {t} is outside the sampled range [{start}, {end}]")]
    OutOfTimeRange { t: f64, start: f64, end: f64 },
    /// A grid header file could not be parsed.
    #[error("malformed grid header: {0}")]
    MalformedHeader(String),
    /// The raw grid payload does not match the size implied by the header.
    #[error("grid payload is {actual} bytes but the header implies {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    /// A decomposition cannot give every process at least one block.
    #[error("{blocks} blocks cannot cover {processes} processes")]
    TooFewBlocks { blocks: usize, processes: usize },
    /// Serialized trajectory-tree bytes failed validation.
    #[error("malformed trajectories tree: {0}")]
    MalformedTree(String),
    /// A transfer observation was rejected before entering the model.
    #[error("invalid transfer record: {0}")]
    InvalidRecord(String),
    /// A fit was requested for an event kind with no observations.
    #[error("no transfer records for event kind {0:?}")]
    NoData(TransferKind),
    /// A cost aggregate was requested over an empty process neighborhood.
    #[error("empty process neighborhood")]
    EmptyNeighborhood,
    /// A policy latent was requested for a block with zero estimated workload.
    #[error("block workload is zero; the policy latent is undefined")]
    ZeroWorkload,
    /// A relative error was requested against an all-zero actual workload.
    #[error("total actual advection time is zero")]
    DivideByZero,
    /// A balance metric was requested with no recorded work on any rank.
    #[error("no per-rank work recorded")]
    NoWork,
    /// A configuration failed validation.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    /// A runtime consistency check failed (only raised with validation on).
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    /// An export or load touched the filesystem and failed.
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}
