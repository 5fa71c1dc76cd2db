//! Velocity fields: two analytic benchmark flows and a gridded field loaded
//! from a header/raw file pair.
//!
//! All fields evaluate to a velocity in up to three dimensions. Evaluation is
//! checked against the spatial domain (and the sampled time range for
//! unsteady grids); the tracing code uses a clamped variant for intermediate
//! integration stages so a stage probe just outside the domain cannot abort a
//! step.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::space::{Aabb, Point3};

/// A velocity field.
#[derive(Debug, Clone)]
pub enum FieldSpec {
    /// Steady Arnold–Beltrami–Childress flow on a 3-D box.
    AbcFlow {
        a: f64,
        b: f64,
        c: f64,
        domain: Aabb,
    },
    /// Unsteady double-gyre flow on a 2-D box; defined for all times.
    DoubleGyre {
        a: f64,
        eps: f64,
        omega: f64,
        domain: Aabb,
    },
    /// Sampled field with multilinear interpolation in space and linear
    /// interpolation in time.
    Grid(Arc<GridField>),
}

impl FieldSpec {
    /// ABC flow on the conventional `[0, 2π]³` box.
    #[must_use]
    pub fn abc_flow(a: f64, b: f64, c: f64) -> Self {
        let tau = std::f64::consts::TAU;
        Self::AbcFlow {
            a,
            b,
            c,
            domain: Aabb::steady([0.0; 3], [tau; 3], 3),
        }
    }

    /// Double gyre on the conventional `[0, 2] × [0, 1]` box.
    #[must_use]
    pub fn double_gyre(a: f64, eps: f64, omega: f64) -> Self {
        Self::DoubleGyre {
            a,
            eps,
            omega,
            domain: Aabb::steady([0.0; 3], [2.0, 1.0, 0.0], 2),
        }
    }

    /// The spatial domain.
    #[must_use]
    pub fn domain(&self) -> Aabb {
        match self {
            Self::AbcFlow { domain, .. } | Self::DoubleGyre { domain, .. } => *domain,
            Self::Grid(g) => g.domain,
        }
    }

    /// Number of spatial dimensions (2 or 3).
    #[must_use]
    pub fn dim(&self) -> usize {
        self.domain().dim
    }

    /// Whether the field is independent of time.
    #[must_use]
    pub fn is_steady(&self) -> bool {
        match self {
            Self::AbcFlow { .. } => true,
            Self::DoubleGyre { .. } => false,
            Self::Grid(g) => g.timesteps == 1,
        }
    }

    /// The bounded time range for fields that have one. Analytic fields are
    /// defined for all times and return `None`.
    #[must_use]
    pub fn time_range(&self) -> Option<(f64, f64)> {
        match self {
            Self::Grid(g) if g.timesteps > 1 => Some((0.0, (g.timesteps - 1) as f64 * g.dt)),
            _ => None,
        }
    }

    /// Velocity at position `p` and time `t`.
    ///
    /// Steady fields ignore `t`. Errors with [`Error::OutOfDomain`] when `p`
    /// lies outside the spatial domain and [`Error::OutOfTimeRange`] when an
    /// unsteady grid is sampled outside its stored time window.
    pub fn eval(&self, p: Point3, t: f64) -> Result<Point3> {
        if !self.domain().contains(p) {
            return Err(Error::OutOfDomain(p));
        }
        if let Some((start, end)) = self.time_range() {
            if t < start || t > end {
                return Err(Error::OutOfTimeRange { t, start, end });
            }
        }
        Ok(self.eval_clamped(p, t))
    }

    /// Velocity with grid samples clamped into the stored domain and time
    /// window. Analytic fields evaluate their closed form directly. Used for
    /// intermediate integration stages.
    #[must_use]
    pub(crate) fn eval_clamped(&self, p: Point3, t: f64) -> Point3 {
        match self {
            Self::AbcFlow { a, b, c, .. } => [
                a * p[2].sin() + c * p[1].cos(),
                b * p[0].sin() + a * p[2].cos(),
                c * p[1].sin() + b * p[0].cos(),
            ],
            Self::DoubleGyre { a, eps, omega, .. } => {
                let s = eps * (omega * t).sin();
                let f = s * p[0] * p[0] + (1.0 - 2.0 * s) * p[0];
                let dfdx = 2.0 * s * p[0] + (1.0 - 2.0 * s);
                let pi = std::f64::consts::PI;
                [
                    -pi * a * (pi * f).sin() * (pi * p[1]).cos(),
                    pi * a * (pi * f).cos() * (pi * p[1]).sin() * dfdx,
                    0.0,
                ]
            }
            Self::Grid(g) => g.interpolate_clamped(p, t),
        }
    }
}

/// A velocity field sampled on a regular grid.
///
/// Samples are `f32` and widened to `f64` on access. The raw layout runs
/// x-fastest, then y, then z, then time, with velocity components interleaved
/// per sample point.
#[derive(Debug)]
pub struct GridField {
    /// Nodes per spatial axis; the third entry is 1 for 2-D grids.
    dims: [usize; 3],
    /// Spatial dimensionality (2 or 3).
    dim: usize,
    components: usize,
    timesteps: usize,
    domain: Aabb,
    /// Time spacing between consecutive stored timesteps.
    dt: f64,
    /// Node spacing per spatial axis.
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl GridField {
    /// Parses a header string and raw little-endian `f32` payload.
    pub fn parse(header: &str, raw: &[u8]) -> Result<Self> {
        let mut dims: Option<Vec<usize>> = None;
        let mut components: Option<usize> = None;
        let mut timesteps: Option<usize> = None;
        let mut domain_min: Option<Vec<f64>> = None;
        let mut domain_max: Option<Vec<f64>> = None;
        let mut dt: Option<f64> = None;

        for (lineno, line) in header.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| malformed(lineno, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "dims" => dims = Some(parse_list(lineno, value)?),
                "components" => components = Some(parse_one(lineno, value)?),
                "timesteps" => timesteps = Some(parse_one(lineno, value)?),
                "domain_min" => domain_min = Some(parse_list(lineno, value)?),
                "domain_max" => domain_max = Some(parse_list(lineno, value)?),
                "dt" => dt = Some(parse_one(lineno, value)?),
                other => {
                    return Err(malformed(lineno, &format!("unknown key `{other}`")));
                }
            }
        }

        let dims_v = require(dims, "dims")?;
        let components = require(components, "components")?;
        let timesteps = require(timesteps, "timesteps")?;
        let domain_min = require(domain_min, "domain_min")?;
        let domain_max = require(domain_max, "domain_max")?;
        let dt = require(dt, "dt")?;

        let dim = dims_v.len();
        if dim != 2 && dim != 3 {
            return Err(header_err("dims must list 2 or 3 axes"));
        }
        if dims_v.iter().any(|&n| n < 2) {
            return Err(header_err("each spatial axis needs at least 2 nodes"));
        }
        if components != dim {
            return Err(header_err(
                "components must match the number of spatial axes",
            ));
        }
        if timesteps == 0 {
            return Err(header_err("timesteps must be at least 1"));
        }
        if timesteps > 1 && (dt.is_nan() || dt <= 0.0) {
            return Err(header_err("dt must be positive for unsteady grids"));
        }
        if domain_min.len() != dim || domain_max.len() != dim {
            return Err(header_err(
                "domain bounds must match the number of spatial axes",
            ));
        }
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for a in 0..dim {
            if domain_min[a].is_nan() || domain_max[a].is_nan() || domain_min[a] >= domain_max[a] {
                return Err(header_err("domain_min must be strictly below domain_max"));
            }
            min[a] = domain_min[a];
            max[a] = domain_max[a];
        }

        let mut dims3 = [1usize; 3];
        dims3[..dim].copy_from_slice(&dims_v);
        let samples = dims3[0] * dims3[1] * dims3[2] * timesteps * components;
        let expected = samples * 4;
        if raw.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                actual: raw.len(),
            });
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();

        let mut spacing = [1.0; 3];
        for a in 0..dim {
            spacing[a] = (max[a] - min[a]) / (dims3[a] - 1) as f64;
        }
        let time_end = if timesteps > 1 {
            (timesteps - 1) as f64 * dt
        } else {
            0.0
        };
        Ok(Self {
            dims: dims3,
            dim,
            components,
            timesteps,
            domain: Aabb {
                min,
                max,
                dim,
                time: (0.0, time_end),
            },
            dt,
            spacing,
            data,
        })
    }

    fn sample(&self, ix: usize, iy: usize, iz: usize, it: usize, c: usize) -> f64 {
        let [nx, ny, nz] = self.dims;
        debug_assert!(ix < nx && iy < ny && iz < nz);
        let node = ((it * nz + iz) * ny + iy) * nx + ix;
        f64::from(self.data[node * self.components + c])
    }

    /// Index and interpolation weight along spatial axis `a` for coordinate
    /// `x`, clamped into the domain. Positions that reproduce a node
    /// coordinate exactly snap to that node so stored samples are returned
    /// bit-for-bit.
    fn axis_coord(&self, a: usize, x: f64) -> (usize, f64) {
        let n = self.dims[a];
        let x0 = self.domain.min[a];
        let u = (x - x0) / self.spacing[a];
        let j = u.round();
        if j >= 0.0 && j < n as f64 && x0 + j * self.spacing[a] == x {
            let j = j as usize;
            return if j == n - 1 { (n - 2, 1.0) } else { (j, 0.0) };
        }
        let i = (u.floor() as isize).clamp(0, n as isize - 2) as usize;
        (i, (u - i as f64).clamp(0.0, 1.0))
    }

    fn interpolate_clamped(&self, p: Point3, t: f64) -> Point3 {
        let mut idx = [0usize; 3];
        let mut w = [0.0f64; 3];
        for a in 0..self.dim {
            let x = p[a].clamp(self.domain.min[a], self.domain.max[a]);
            let (i, wa) = self.axis_coord(a, x);
            idx[a] = i;
            w[a] = wa;
        }
        if self.timesteps == 1 {
            return self.interp_space(idx, w, 0);
        }
        let (start, end) = (0.0, (self.timesteps - 1) as f64 * self.dt);
        let tc = t.clamp(start, end);
        let u = tc / self.dt;
        let j = u.round();
        let (it, wt) = if j >= 0.0 && j < self.timesteps as f64 && j * self.dt == tc {
            let j = j as usize;
            if j == self.timesteps - 1 {
                (self.timesteps - 2, 1.0)
            } else {
                (j, 0.0)
            }
        } else {
            let i = (u.floor() as isize).clamp(0, self.timesteps as isize - 2) as usize;
            (i, (u - i as f64).clamp(0.0, 1.0))
        };
        let lo = self.interp_space(idx, w, it);
        let hi = self.interp_space(idx, w, it + 1);
        [
            lerp(lo[0], hi[0], wt),
            lerp(lo[1], hi[1], wt),
            lerp(lo[2], hi[2], wt),
        ]
    }

    fn interp_space(&self, idx: [usize; 3], w: [f64; 3], it: usize) -> Point3 {
        let dz_range = if self.dim == 3 { 2 } else { 1 };
        let mut out = [0.0; 3];
        for (c, slot) in out.iter_mut().enumerate().take(self.components) {
            let mut corners = [0.0f64; 8];
            for dz in 0..dz_range {
                for dy in 0..2 {
                    for dx in 0..2 {
                        corners[dz * 4 + dy * 2 + dx] =
                            self.sample(idx[0] + dx, idx[1] + dy, idx[2] + dz, it, c);
                    }
                }
            }
            for base in [0, 2, 4, 6] {
                corners[base] = lerp(corners[base], corners[base + 1], w[0]);
            }
            corners[0] = lerp(corners[0], corners[2], w[1]);
            corners[4] = lerp(corners[4], corners[6], w[1]);
            *slot = if self.dim == 3 {
                lerp(corners[0], corners[4], w[2])
            } else {
                corners[0]
            };
        }
        out
    }
}

/// Linear interpolation that returns the endpoints bit-for-bit at `t == 0`
/// and `t == 1`.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else if t == 1.0 {
        b
    } else {
        a + t * (b - a)
    }
}

fn malformed(lineno: usize, msg: &str) -> Error {
    Error::MalformedHeader(format!("line {}: {msg}", lineno + 1))
}

fn header_err(msg: &str) -> Error {
    Error::MalformedHeader(msg.to_string())
}

fn require<T>(v: Option<T>, key: &str) -> Result<T> {
    v.ok_or_else(|| header_err(&format!("missing key `{key}`")))
}

fn parse_one<T: std::str::FromStr>(lineno: usize, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| malformed(lineno, &format!("cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(lineno: usize, value: &str) -> Result<Vec<T>> {
    value
        .split_whitespace()
        .map(|tok| parse_one(lineno, tok))
        .collect()
}

/// Loads a gridded field from a header file and its raw sample payload.
pub fn load_grid(header_path: &Path, raw_path: &Path) -> Result<FieldSpec> {
    let header = std::fs::read_to_string(header_path)?;
    let raw = std::fs::read(raw_path)?;
    Ok(FieldSpec::Grid(Arc::new(GridField::parse(&header, &raw)?)))
}
