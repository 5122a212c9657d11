//! The flat torus `[0,1)^n` and its wrapping arithmetic.
//!
//! Every state coordinate is interpreted modulo 1 per axis. Distances use the
//! minimal-image convention, so a point and its periodic copy are at distance
//! zero.

use crate::error::{Error, Result};

/// Axis period of the torus. Fixed: all built-in analysis assumes the unit torus.
pub const PERIOD: f64 = 1.0;

/// Dimensions of the state, control, and noise spaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TorusGeometry {
    pub dim_state: usize,
    pub dim_control: usize,
    pub dim_noise: usize,
}

impl TorusGeometry {
    pub fn new(dim_state: usize, dim_control: usize, dim_noise: usize) -> Result<Self> {
        if dim_state == 0 || dim_control == 0 || dim_noise == 0 {
            return Err(Error::InvalidArgument(
                "state, control, and noise dimensions must all be >= 1".into(),
            ));
        }
        Ok(Self { dim_state, dim_control, dim_noise })
    }
}

/// Wrap a single coordinate into `[0,1)`.
///
/// `rem_euclid` can return exactly 1.0 for tiny negative inputs, so the result
/// is folded back explicitly.
pub fn wrap_coord(x: f64) -> f64 {
    let mut y = x.rem_euclid(PERIOD);
    if y >= PERIOD {
        y -= PERIOD;
    }
    y
}

/// Wrap every coordinate of a point in place.
pub fn wrap_point(x: &mut [f64]) {
    for xi in x.iter_mut() {
        *xi = wrap_coord(*xi);
    }
}

/// Minimal-image distance between two coordinates on the circle.
pub fn torus_dist_coord(a: f64, b: f64) -> f64 {
    let d = (wrap_coord(a) - wrap_coord(b)).abs();
    d.min(PERIOD - d)
}

/// Squared minimal-image distance between two points.
pub fn torus_dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = torus_dist_coord(x, y);
            d * d
        })
        .sum()
}
