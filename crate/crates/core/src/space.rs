//! Small geometry helpers shared by the field, decomposition, and tracing
//! modules.

/// A point or vector in up to three spatial dimensions. Two-dimensional
/// fields keep the third component at zero.
pub type Point3 = [f64; 3];

/// Componentwise `a + s * b`.
#[must_use]
pub fn axpy(a: Point3, s: f64, b: Point3) -> Point3 {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

/// Euclidean norm.
#[must_use]
pub fn norm(v: Point3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// An axis-aligned box over the first `dim` spatial axes plus an optional
/// time extent. Unused spatial components are kept at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
    /// Number of meaningful spatial axes (2 or 3).
    pub dim: usize,
    /// Time extent; equal endpoints mean "no time extent".
    pub time: (f64, f64),
}

impl Aabb {
    /// A box with no time extent.
    #[must_use]
    pub fn steady(min: Point3, max: Point3, dim: usize) -> Self {
        Self {
            min,
            max,
            dim,
            time: (0.0, 0.0),
        }
    }

    /// Whether the spatial part of the box contains `p` (faces inclusive).
    #[must_use]
    pub fn contains(&self, p: Point3) -> bool {
        (0..self.dim).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Edge length along spatial axis `a`.
    #[must_use]
    pub fn extent(&self, a: usize) -> f64 {
        self.max[a] - self.min[a]
    }

    /// Smallest spatial edge length.
    #[must_use]
    pub fn min_extent(&self) -> f64 {
        (0..self.dim)
            .map(|a| self.extent(a))
            .fold(f64::INFINITY, f64::min)
    }
}
