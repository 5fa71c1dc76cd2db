//! Linear transfer-cost models learned from observed communication events.
//!
//! Every simulated process watches its own transfers — block sends/receives
//! and particle sends/receives — as `(entity count, seconds)` records and
//! fits `y = d·x + e` per event kind by ordinary least squares. The slope
//! `d` is the per-entity cost used by the donation agent's cost features;
//! the intercept `e` models per-event start-up latency, which the simulator
//! charges once per event.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// The four observed communication event kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TransferKind {
    BlockSend,
    BlockRecv,
    ParticleSend,
    ParticleRecv,
}

impl TransferKind {
    pub const ALL: [TransferKind; 4] = [
        TransferKind::BlockSend,
        TransferKind::BlockRecv,
        TransferKind::ParticleSend,
        TransferKind::ParticleRecv,
    ];

    fn index(self) -> usize {
        match self {
            TransferKind::BlockSend => 0,
            TransferKind::BlockRecv => 1,
            TransferKind::ParticleSend => 2,
            TransferKind::ParticleRecv => 3,
        }
    }

    /// Whether the entity unit is a block (else a particle batch).
    #[must_use]
    pub fn is_block(self) -> bool {
        matches!(self, TransferKind::BlockSend | TransferKind::BlockRecv)
    }
}

/// One observed transfer: `x` entities took `y` seconds end to end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferRecord {
    pub kind: TransferKind,
    pub x: u64,
    pub y: f64,
}

/// Per-entity cost assumptions used before any fit exists.
#[derive(Debug, Clone, Copy)]
pub struct CommPriors {
    pub d_block: f64,
    pub d_particle: f64,
    pub latency: f64,
}

impl Default for CommPriors {
    fn default() -> Self {
        Self {
            d_block: 1e-2,
            d_particle: 1e-6,
            latency: 1e-4,
        }
    }
}

/// Fitted (or prior) per-entity transfer costs for all four event kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferRates {
    pub d_block_send: f64,
    pub d_block_recv: f64,
    pub d_particle_send: f64,
    pub d_particle_recv: f64,
}

/// Default ring capacity per event kind.
pub const DEFAULT_RECORD_CAPACITY: usize = 1024;

/// Per-kind observation rings and fitted linear parameters for one process.
#[derive(Debug, Clone)]
pub struct CommCostModel {
    records: [VecDeque<(u64, f64)>; 4],
    fitted: [Option<(f64, f64)>; 4],
    priors: CommPriors,
    capacity: usize,
}

impl CommCostModel {
    #[must_use]
    pub fn new(priors: CommPriors) -> Self {
        Self::with_capacity(priors, DEFAULT_RECORD_CAPACITY)
    }

    #[must_use]
    pub fn with_capacity(priors: CommPriors, capacity: usize) -> Self {
        Self {
            records: Default::default(),
            fitted: [None; 4],
            priors,
            capacity: capacity.max(1),
        }
    }

    /// Stores one observation, evicting the oldest past capacity.
    pub fn record_event(&mut self, kind: TransferKind, x: u64, y: f64) -> Result<()> {
        if x < 1 {
            return Err(Error::InvalidRecord(format!(
                "entity count {x} must be at least 1"
            )));
        }
        if !y.is_finite() || y < 0.0 {
            return Err(Error::InvalidRecord(format!(
                "seconds {y} must be finite and non-negative"
            )));
        }
        let ring = &mut self.records[kind.index()];
        ring.push_back((x, y));
        while ring.len() > self.capacity {
            ring.pop_front();
        }
        Ok(())
    }

    /// Number of stored observations for `kind`.
    #[must_use]
    pub fn record_count(&self, kind: TransferKind) -> usize {
        self.records[kind.index()].len()
    }

    /// Least-squares fit of `y = d·x + e` over the stored records of `kind`.
    ///
    /// With a single distinct `x` the slope is 0 and the intercept the mean
    /// of `y`. Both parameters are clamped non-negative. The result is
    /// cached and used by [`Self::predict`] and [`Self::rates`].
    pub fn fit(&mut self, kind: TransferKind) -> Result<(f64, f64)> {
        let ring = &self.records[kind.index()];
        if ring.is_empty() {
            return Err(Error::NoData(kind));
        }
        let n = ring.len() as f64;
        let mean_x = ring.iter().map(|&(x, _)| x as f64).sum::<f64>() / n;
        let mean_y = ring.iter().map(|&(_, y)| y).sum::<f64>() / n;
        let sxx: f64 = ring.iter().map(|&(x, _)| (x as f64 - mean_x).powi(2)).sum();
        let sxy: f64 = ring
            .iter()
            .map(|&(x, y)| (x as f64 - mean_x) * (y - mean_y))
            .sum();
        let (d, e) = if sxx == 0.0 {
            (0.0, mean_y)
        } else {
            let d = sxy / sxx;
            if d < 0.0 {
                (0.0, mean_y)
            } else {
                (d, mean_y - d * mean_x)
            }
        };
        let params = (d, e.max(0.0));
        self.fitted[kind.index()] = Some(params);
        Ok(params)
    }

    /// Refits every kind that has observations.
    pub fn refit_all(&mut self) {
        for kind in TransferKind::ALL {
            let _ = self.fit(kind);
        }
    }

    /// `(d, e)` for `kind`: the cached fit, or the configured prior before
    /// any fit.
    #[must_use]
    pub fn params(&self, kind: TransferKind) -> (f64, f64) {
        self.fitted[kind.index()].unwrap_or_else(|| {
            let d = if kind.is_block() {
                self.priors.d_block
            } else {
                self.priors.d_particle
            };
            (d, self.priors.latency)
        })
    }

    /// Marginal cost of moving `x` entities: `d·x`. Latency is charged once
    /// per event by the simulator, not here.
    #[must_use]
    pub fn predict(&self, kind: TransferKind, x: u64) -> f64 {
        self.params(kind).0 * x as f64
    }

    /// Per-entity slopes for all four kinds.
    #[must_use]
    pub fn rates(&self) -> TransferRates {
        TransferRates {
            d_block_send: self.params(TransferKind::BlockSend).0,
            d_block_recv: self.params(TransferKind::BlockRecv).0,
            d_particle_send: self.params(TransferKind::ParticleSend).0,
            d_particle_recv: self.params(TransferKind::ParticleRecv).0,
        }
    }
}
