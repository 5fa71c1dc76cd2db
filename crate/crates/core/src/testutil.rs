//! Helpers shared by unit tests across modules.

use std::sync::Arc;

use crate::vector_field::{FieldSpec, GridField};

/// Builds a grid field whose per-node samples come from `f(ix, iy, iz, it, c)`.
pub(crate) fn grid_from_fn(
    dims: &[usize],
    timesteps: usize,
    min: &[f64],
    max: &[f64],
    dt: f64,
    f: impl Fn(usize, usize, usize, usize, usize) -> f32,
) -> FieldSpec {
    let dim = dims.len();
    let header = format!(
        "dims = {}\ncomponents = {}\ntimesteps = {}\ndomain_min = {}\ndomain_max = {}\ndt = {}\n",
        join(dims),
        dim,
        timesteps,
        join(min),
        join(max),
        dt
    );
    let mut dims3 = [1usize; 3];
    dims3[..dim].copy_from_slice(dims);
    let mut raw = Vec::new();
    for it in 0..timesteps {
        for iz in 0..dims3[2] {
            for iy in 0..dims3[1] {
                for ix in 0..dims3[0] {
                    for c in 0..dim {
                        raw.extend_from_slice(&f(ix, iy, iz, it, c).to_le_bytes());
                    }
                }
            }
        }
    }
    FieldSpec::Grid(Arc::new(GridField::parse(&header, &raw).unwrap()))
}

/// A steady 2-D field with constant velocity `(vx, vy)` on `[0,1] × [0,1]`.
pub(crate) fn uniform_field(vx: f32, vy: f32) -> FieldSpec {
    grid_from_fn(
        &[2, 2],
        1,
        &[0.0, 0.0],
        &[1.0, 1.0],
        0.0,
        move |_, _, _, _, c| {
            if c == 0 {
                vx
            } else {
                vy
            }
        },
    )
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Asserts `a` and `b` agree within relative tolerance `tol` (absolute near
/// zero).
pub(crate) fn assert_close(a: f64, b: f64, tol: f64) {
    let scale = a.abs().max(b.abs()).max(1.0);
    assert!((a - b).abs() <= tol * scale, "{a} vs {b} (tol {tol})");
}
