//! Uniform space-time grids on `[0,T] x [0,1)^n` with periodic indexing.
//!
//! Time is the leading axis; each time level holds `n_x^n` spatial nodes in
//! row-major order (axis 0 slowest). All spatial index arithmetic wraps
//! modulo `n_x` per axis.

use crate::error::{Error, Result};
use crate::geometry::TorusGeometry;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpaceTimeGrid {
    pub geometry: TorusGeometry,
    /// Time horizon T.
    pub horizon: f64,
    /// Number of time levels (>= 2); level spacing is `T/(n_t-1)`.
    pub n_t: usize,
    /// Nodes per spatial axis (>= 4); spacing `1/n_x`.
    pub n_x: usize,
}

impl SpaceTimeGrid {
    pub fn new(geometry: TorusGeometry, horizon: f64, n_t: usize, n_x: usize) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        if n_t < 2 {
            return Err(Error::InvalidArgument(format!("n_t must be >= 2, got {n_t}")));
        }
        if n_x < 4 {
            return Err(Error::InvalidArgument(format!("n_x must be >= 4, got {n_x}")));
        }
        if geometry.dim_state > 3 {
            return Err(Error::InvalidArgument(
                "grids with n > 3 are out of the supported desk-scale range".into(),
            ));
        }
        Ok(Self { geometry, horizon, n_t, n_x })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / (self.n_t - 1) as f64
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.n_x as f64
    }

    /// Spatial cell volume `dx^n`.
    pub fn cell_volume(&self) -> f64 {
        self.dx().powi(self.geometry.dim_state as i32)
    }

    /// Number of spatial nodes per time level.
    pub fn n_cells(&self) -> usize {
        self.n_x.pow(self.geometry.dim_state as u32)
    }

    pub fn time(&self, level: usize) -> f64 {
        level as f64 * self.dt()
    }

    /// Stride of `axis` in the flat spatial index.
    fn stride(&self, axis: usize) -> usize {
        self.n_x.pow((self.geometry.dim_state - 1 - axis) as u32)
    }

    /// Flat spatial index shifted by `offset` nodes along `axis`, wrapping
    /// periodically.
    pub fn shift(&self, idx: usize, axis: usize, offset: isize) -> usize {
        let stride = self.stride(axis);
        let digit = (idx / stride) % self.n_x;
        let new_digit =
            (digit as isize + offset).rem_euclid(self.n_x as isize) as usize;
        idx + new_digit * stride - digit * stride
    }

    /// Physical coordinates of a flat spatial index.
    pub fn node_position(&self, idx: usize, out: &mut [f64]) {
        let n = self.geometry.dim_state;
        debug_assert_eq!(out.len(), n);
        let dx = self.dx();
        let mut rest = idx;
        for axis in 0..n {
            let stride = self.stride(axis);
            let digit = rest / stride;
            rest -= digit * stride;
            out[axis] = digit as f64 * dx;
        }
    }

    /// Flat spatial index from per-axis node indices.
    pub fn spatial_index(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .enumerate()
            .map(|(axis, &c)| (c % self.n_x) * self.stride(axis))
            .sum()
    }
}
