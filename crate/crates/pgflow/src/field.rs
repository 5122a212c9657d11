//! Grid-sampled fields on `[0,T] x [0,1)^n`: scalar fields (value functions,
//! densities) and control fields, together with the periodic finite-difference
//! calculus, multilinear interpolation, and the norms used throughout.
//!
//! Storage is row-major with time as the leading axis. Spatial derivatives are
//! second-order central differences with periodic wrap; quadrature is the
//! rectangle rule in space (spectrally accurate for smooth periodic functions)
//! and the trapezoid rule in time.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::wrap_coord;
use crate::grid::SpaceTimeGrid;

pub const FIELD_MAGIC: &[u8; 8] = b"CTRLFLD1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldRole {
    Generic,
    Value,
    Density,
}

impl FieldRole {
    fn tag(self) -> u32 {
        match self {
            FieldRole::Generic => 0,
            FieldRole::Value => 1,
            FieldRole::Density => 2,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(FieldRole::Generic),
            1 => Ok(FieldRole::Value),
            2 => Ok(FieldRole::Density),
            other => Err(Error::Format(format!("unknown scalar field role tag {other}"))),
        }
    }
}

const CONTROL_ROLE_TAG: u32 = 3;

/// Time/space interpolation stencil: two bracketing time levels and up to
/// `2^n` spatial corners with multilinear weights.
struct InterpStencil {
    level: usize,
    theta: f64,
    corners: [(usize, f64); 8],
    n_corners: usize,
}

fn interp_stencil(grid: &SpaceTimeGrid, t: f64, x: &[f64]) -> Result<InterpStencil> {
    if !(0.0..=grid.horizon * (1.0 + 1e-12)).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "time {t} outside [0, {}]",
            grid.horizon
        )));
    }
    let n = grid.geometry.dim_state;
    if x.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "point has {} coordinates, grid expects {n}",
            x.len()
        )));
    }
    let dt = grid.dt();
    let level = ((t / dt).floor() as usize).min(grid.n_t - 2);
    let theta = ((t - grid.time(level)) / dt).clamp(0.0, 1.0);

    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..n {
        let xa = wrap_coord(x[a]) * grid.n_x as f64;
        let ia = (xa.floor() as usize).min(grid.n_x - 1);
        base[a] = ia;
        frac[a] = xa - ia as f64;
    }
    let mut corners = [(0usize, 0.0f64); 8];
    let n_corners = 1usize << n;
    for bits in 0..n_corners {
        let mut coords = [0usize; 3];
        let mut w = 1.0;
        for a in 0..n {
            if bits >> a & 1 == 1 {
                coords[a] = (base[a] + 1) % grid.n_x;
                w *= frac[a];
            } else {
                coords[a] = base[a];
                w *= 1.0 - frac[a];
            }
        }
        corners[bits] = (grid.spatial_index(&coords[..n]), w);
    }
    Ok(InterpStencil { level, theta, corners, n_corners })
}

// ---------------------------------------------------------------------------
// Scalar fields
// ---------------------------------------------------------------------------

/// A grid-sampled scalar function of `(t, x)`, role-tagged as a value
/// function, a density, or a generic test field.
#[derive(Clone, Debug)]
pub struct ScalarField {
    pub grid: SpaceTimeGrid,
    pub role: FieldRole,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: SpaceTimeGrid, role: FieldRole) -> Self {
        let len = grid.n_t * grid.n_cells();
        Self { grid, role, values: vec![0.0; len] }
    }

    pub fn from_fn(
        grid: SpaceTimeGrid,
        role: FieldRole,
        f: impl Fn(f64, &[f64]) -> f64,
    ) -> Result<Self> {
        let mut field = Self::zeros(grid, role);
        let n_cells = grid.n_cells();
        let mut x = vec![0.0; grid.geometry.dim_state];
        for level in 0..grid.n_t {
            let t = grid.time(level);
            for s in 0..n_cells {
                grid.node_position(s, &mut x);
                let v = f(t, &x);
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("field value at t={t}, x={x:?}")));
                }
                field.values[level * n_cells + s] = v;
            }
        }
        Ok(field)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slice(&self, level: usize) -> &[f64] {
        let n = self.grid.n_cells();
        &self.values[level * n..(level + 1) * n]
    }

    pub fn slice_mut(&mut self, level: usize) -> &mut [f64] {
        let n = self.grid.n_cells();
        &mut self.values[level * n..(level + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Spatial mean of one time level (rectangle rule over the unit torus).
    pub fn spatial_mean(&self, level: usize) -> f64 {
        let s = self.slice(level);
        s.iter().sum::<f64>() / s.len() as f64
    }

    /// Density-role invariant: no entry below `-1e-12` and spatial mean
    /// `1 +- 1e-8` at every level (uniform initial mass convention).
    pub fn validate_density(&self) -> Result<()> {
        if self.role != FieldRole::Density {
            return Err(Error::InvalidArgument("field is not density-tagged".into()));
        }
        for level in 0..self.grid.n_t {
            let mean = self.spatial_mean(level);
            if (mean - 1.0).abs() > 1e-8 {
                return Err(Error::ConservationFailure { drift: (mean - 1.0).abs(), tol: 1e-8 });
            }
        }
        if self.min_value() < -1e-12 {
            return Err(Error::Numeric(format!("density undershoot {}", self.min_value())));
        }
        Ok(())
    }

    /// Central-difference spatial gradient at one time level; output is
    /// `n_cells x n` row-major.
    pub fn gradient_x(&self, level: usize) -> Vec<f64> {
        let n = self.grid.geometry.dim_state;
        let mut out = vec![0.0; self.grid.n_cells() * n];
        slice_gradient(&self.grid, self.slice(level), &mut out);
        out
    }

    /// Central-difference spatial Hessian at one time level; output is
    /// `n_cells x n x n` row-major and exactly symmetric.
    pub fn hessian_x(&self, level: usize) -> Vec<f64> {
        let n = self.grid.geometry.dim_state;
        let mut out = vec![0.0; self.grid.n_cells() * n * n];
        slice_hessian(&self.grid, self.slice(level), &mut out);
        out
    }

    /// Multilinear-in-space, linear-in-time interpolation with periodic wrap.
    pub fn interpolate(&self, t: f64, x: &[f64]) -> Result<f64> {
        let st = interp_stencil(&self.grid, t, x)?;
        let lo = self.slice(st.level);
        let hi = self.slice(st.level + 1);
        let mut a = 0.0;
        let mut b = 0.0;
        for &(idx, w) in &st.corners[..st.n_corners] {
            a += w * lo[idx];
            b += w * hi[idx];
        }
        Ok((1.0 - st.theta) * a + st.theta * b)
    }

    /// Space-time L2 norm: trapezoid in time, rectangle in space.
    pub fn l2_norm(&self) -> f64 {
        space_time_l2(&self.grid, |level| {
            self.slice(level).iter().map(|v| v * v).sum::<f64>()
        })
    }

    /// L2 norm of the difference `self - other` without materializing it.
    pub fn l2_distance(&self, other: &ScalarField) -> f64 {
        assert_eq!(self.grid, other.grid, "fields live on different grids");
        space_time_l2(&self.grid, |level| {
            self.slice(level)
                .iter()
                .zip(other.slice(level))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
    }

    /// The `H^2` space-time norm: quadrature of `|V|^2 + |grad V|^2 + |hess V|^2`.
    pub fn h2_norm(&self) -> f64 {
        space_time_l2(&self.grid, |level| {
            let g = self.gradient_x(level);
            let h = self.hessian_x(level);
            self.slice(level).iter().map(|v| v * v).sum::<f64>()
                + g.iter().map(|v| v * v).sum::<f64>()
                + h.iter().map(|v| v * v).sum::<f64>()
        })
    }

    /// `H^2` norm of `self - other`.
    pub fn h2_distance(&self, other: &ScalarField) -> f64 {
        assert_eq!(self.grid, other.grid, "fields live on different grids");
        let diff = {
            let mut d = self.clone();
            d.role = FieldRole::Generic;
            for (v, o) in d.values.iter_mut().zip(&other.values) {
                *v -= o;
            }
            d
        };
        diff.h2_norm()
    }

    pub fn max_abs_diff(&self, other: &ScalarField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_header(&mut w, &self.grid, self.role.tag())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reload a dump. The binary header does not carry the horizon, so the
    /// caller supplies it (typically from the run config).
    pub fn load(path: &Path, horizon: f64) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let (grid, tag) = read_header(&mut r, horizon)?;
        let role = FieldRole::from_tag(tag)?;
        let len = grid.n_t * grid.n_cells();
        let values = read_payload(&mut r, len)?;
        Ok(Self { grid, role, values })
    }

    /// Plain CSV export: one row per node, columns `t, x1..xn, value`.
    pub fn export_csv(&self, out: &mut dyn Write, digest: &str) -> Result<()> {
        writeln!(out, "# digest={digest}")?;
        let n = self.grid.geometry.dim_state;
        write!(out, "t")?;
        for a in 0..n {
            write!(out, ",x{}", a + 1)?;
        }
        writeln!(out, ",value")?;
        let mut x = vec![0.0; n];
        for level in 0..self.grid.n_t {
            let t = self.grid.time(level);
            for s in 0..self.grid.n_cells() {
                self.grid.node_position(s, &mut x);
                write!(out, "{t}")?;
                for xa in &x {
                    write!(out, ",{xa}")?;
                }
                writeln!(out, ",{}", self.slice(level)[s])?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Control fields
// ---------------------------------------------------------------------------

/// A grid-sampled control `u(t,x)` with `n'` components per node. Under the
/// grid parametrization this same array is the parameter vector theta.
#[derive(Clone, Debug)]
pub struct ControlField {
    pub grid: SpaceTimeGrid,
    values: Vec<f64>,
}

impl ControlField {
    pub fn zeros(grid: SpaceTimeGrid) -> Self {
        let len = grid.n_t * grid.n_cells() * grid.geometry.dim_control;
        Self { grid, values: vec![0.0; len] }
    }

    pub fn constant(grid: SpaceTimeGrid, value: &[f64]) -> Result<Self> {
        if value.len() != grid.geometry.dim_control {
            return Err(Error::DimensionMismatch("constant control has wrong arity".into()));
        }
        let mut f = Self::zeros(grid);
        let nc = grid.geometry.dim_control;
        for chunk in f.values.chunks_mut(nc) {
            chunk.copy_from_slice(value);
        }
        Ok(f)
    }

    pub fn from_fn(
        grid: SpaceTimeGrid,
        f: impl Fn(f64, &[f64], &mut [f64]),
    ) -> Result<Self> {
        let mut field = Self::zeros(grid);
        let n_cells = grid.n_cells();
        let nc = grid.geometry.dim_control;
        let mut x = vec![0.0; grid.geometry.dim_state];
        for level in 0..grid.n_t {
            let t = grid.time(level);
            for s in 0..n_cells {
                grid.node_position(s, &mut x);
                let off = (level * n_cells + s) * nc;
                f(t, &x, &mut field.values[off..off + nc]);
            }
        }
        if !field.values.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("control field has non-finite entries".into()));
        }
        Ok(field)
    }

    pub fn n_components(&self) -> usize {
        self.grid.geometry.dim_control
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Control vector stored at `(level, spatial index)`.
    pub fn node(&self, level: usize, s: usize) -> &[f64] {
        let nc = self.n_components();
        let off = (level * self.grid.n_cells() + s) * nc;
        &self.values[off..off + nc]
    }

    pub fn node_mut(&mut self, level: usize, s: usize) -> &mut [f64] {
        let nc = self.n_components();
        let off = (level * self.grid.n_cells() + s) * nc;
        &mut self.values[off..off + nc]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Boundedness invariant: every component within the declared control box.
    pub fn validate_box(&self, u_box: f64) -> Result<()> {
        let sup = self.sup_norm();
        if sup > u_box {
            return Err(Error::BoxViolation {
                value: sup,
                bound: u_box,
                location: "control field".into(),
            });
        }
        Ok(())
    }

    /// Interpolate the control vector at `(t, x)` into `out`.
    pub fn interpolate_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let st = interp_stencil(&self.grid, t, x)?;
        let nc = self.n_components();
        debug_assert_eq!(out.len(), nc);
        let n_cells = self.grid.n_cells();
        out.fill(0.0);
        for &(idx, w) in &st.corners[..st.n_corners] {
            let lo = (st.level * n_cells + idx) * nc;
            let hi = ((st.level + 1) * n_cells + idx) * nc;
            let wl = w * (1.0 - st.theta);
            let wh = w * st.theta;
            for c in 0..nc {
                out[c] += wl * self.values[lo + c] + wh * self.values[hi + c];
            }
        }
        Ok(())
    }

    /// Space-time L2 norm over all components.
    pub fn l2_norm(&self) -> f64 {
        let nc = self.n_components();
        let n_cells = self.grid.n_cells();
        space_time_l2(&self.grid, |level| {
            let off = level * n_cells * nc;
            self.values[off..off + n_cells * nc].iter().map(|v| v * v).sum::<f64>()
        })
    }

    pub fn l2_distance(&self, other: &ControlField) -> f64 {
        assert_eq!(self.grid, other.grid, "fields live on different grids");
        let nc = self.n_components();
        let n_cells = self.grid.n_cells();
        space_time_l2(&self.grid, |level| {
            let off = level * n_cells * nc;
            self.values[off..off + n_cells * nc]
                .iter()
                .zip(&other.values[off..off + n_cells * nc])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
    }

    /// Space-time L2 inner product over all components.
    pub fn l2_inner(&self, other: &ControlField) -> f64 {
        assert_eq!(self.grid, other.grid, "fields live on different grids");
        let cell = self.grid.cell_volume();
        let dt = self.grid.dt();
        let nc = self.n_components();
        let n_cells = self.grid.n_cells();
        let mut acc = 0.0;
        for level in 0..self.grid.n_t {
            let w = if level == 0 || level == self.grid.n_t - 1 { 0.5 } else { 1.0 };
            let off = level * n_cells * nc;
            let dot: f64 = self.values[off..off + n_cells * nc]
                .iter()
                .zip(&other.values[off..off + n_cells * nc])
                .map(|(a, b)| a * b)
                .sum();
            acc += w * dt * dot * cell;
        }
        acc
    }

    /// `self += alpha * other`, used by the flow update.
    pub fn axpy(&mut self, alpha: f64, other: &ControlField) {
        assert_eq!(self.grid, other.grid, "fields live on different grids");
        for (v, o) in self.values.iter_mut().zip(&other.values) {
            *v += alpha * o;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in self.values.iter_mut() {
            *v *= alpha;
        }
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_header(&mut w, &self.grid, CONTROL_ROLE_TAG)?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path, horizon: f64) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let (grid, tag) = read_header(&mut r, horizon)?;
        if tag != CONTROL_ROLE_TAG {
            return Err(Error::Format(format!("expected control role tag, got {tag}")));
        }
        let len = grid.n_t * grid.n_cells() * grid.geometry.dim_control;
        let values = read_payload(&mut r, len)?;
        Ok(Self { grid, values })
    }

    pub fn export_csv(&self, out: &mut dyn Write, digest: &str) -> Result<()> {
        writeln!(out, "# digest={digest}")?;
        let n = self.grid.geometry.dim_state;
        let nc = self.n_components();
        write!(out, "t")?;
        for a in 0..n {
            write!(out, ",x{}", a + 1)?;
        }
        for c in 0..nc {
            write!(out, ",u{}", c + 1)?;
        }
        writeln!(out)?;
        let mut x = vec![0.0; n];
        for level in 0..self.grid.n_t {
            let t = self.grid.time(level);
            for s in 0..self.grid.n_cells() {
                self.grid.node_position(s, &mut x);
                write!(out, "{t}")?;
                for xa in &x {
                    write!(out, ",{xa}")?;
                }
                for c in 0..nc {
                    write!(out, ",{}", self.node(level, s)[c])?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Interpolation weights at `(t, x)`: bracketing level, time fraction, and
/// the spatial corner stencil. Shared with the sampler's regression, whose
/// basis functions are exactly these multilinear hats.
pub(crate) struct InterpWeights {
    pub level: usize,
    pub theta: f64,
    pub corners: [(usize, f64); 8],
    pub n_corners: usize,
}

pub(crate) fn interp_weights(grid: &SpaceTimeGrid, t: f64, x: &[f64]) -> Result<InterpWeights> {
    let st = interp_stencil(grid, t, x)?;
    Ok(InterpWeights {
        level: st.level,
        theta: st.theta,
        corners: st.corners,
        n_corners: st.n_corners,
    })
}

/// Gradient kernel on a raw time slice, writing into a preallocated buffer.
/// Solver loops call this directly to avoid reallocating per substep.
pub fn slice_gradient(grid: &SpaceTimeGrid, f: &[f64], out: &mut [f64]) {
    let n = grid.geometry.dim_state;
    let inv2dx = 0.5 / grid.dx();
    for s in 0..grid.n_cells() {
        for a in 0..n {
            let up = f[grid.shift(s, a, 1)];
            let dn = f[grid.shift(s, a, -1)];
            out[s * n + a] = (up - dn) * inv2dx;
        }
    }
}

/// Hessian kernel on a raw time slice; exactly symmetric output.
pub fn slice_hessian(grid: &SpaceTimeGrid, f: &[f64], out: &mut [f64]) {
    let n = grid.geometry.dim_state;
    let dx = grid.dx();
    let inv_dx2 = 1.0 / (dx * dx);
    for s in 0..grid.n_cells() {
        for a in 0..n {
            let up = f[grid.shift(s, a, 1)];
            let dn = f[grid.shift(s, a, -1)];
            out[s * n * n + a * n + a] = (up - 2.0 * f[s] + dn) * inv_dx2;
            for b in (a + 1)..n {
                let pp = f[grid.shift(grid.shift(s, a, 1), b, 1)];
                let pm = f[grid.shift(grid.shift(s, a, 1), b, -1)];
                let mp = f[grid.shift(grid.shift(s, a, -1), b, 1)];
                let mm = f[grid.shift(grid.shift(s, a, -1), b, -1)];
                let mixed = (pp - pm - mp + mm) * 0.25 * inv_dx2;
                out[s * n * n + a * n + b] = mixed;
                out[s * n * n + b * n + a] = mixed;
            }
        }
    }
}

/// Trapezoid-in-time, rectangle-in-space square quadrature shared by the
/// norms: `per_level` returns the plain sum of squared samples at one level.
fn space_time_l2(grid: &SpaceTimeGrid, per_level: impl Fn(usize) -> f64) -> f64 {
    let cell = grid.cell_volume();
    let dt = grid.dt();
    let mut acc = 0.0;
    for level in 0..grid.n_t {
        let w = if level == 0 || level == grid.n_t - 1 { 0.5 } else { 1.0 };
        acc += w * dt * per_level(level) * cell;
    }
    acc.sqrt()
}

fn write_header(w: &mut dyn Write, grid: &SpaceTimeGrid, role_tag: u32) -> Result<()> {
    w.write_all(FIELD_MAGIC)?;
    for v in [
        grid.geometry.dim_state as u32,
        grid.geometry.dim_control as u32,
        grid.n_t as u32,
        grid.n_x as u32,
        role_tag,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_header(r: &mut dyn Read, horizon: f64) -> Result<(SpaceTimeGrid, u32)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FIELD_MAGIC {
        return Err(Error::Format("bad magic, expected CTRLFLD1".into()));
    }
    let mut word = [0u8; 4];
    let mut header = [0u32; 5];
    for h in header.iter_mut() {
        r.read_exact(&mut word)?;
        *h = u32::from_le_bytes(word);
    }
    let geom = crate::geometry::TorusGeometry::new(header[0] as usize, header[1] as usize, 1)?;
    let grid = SpaceTimeGrid::new(geom, horizon, header[2] as usize, header[3] as usize)?;
    Ok((grid, header[4]))
}

fn read_payload(r: &mut dyn Read, len: usize) -> Result<Vec<f64>> {
    let mut values = vec![0.0f64; len];
    let mut buf = [0u8; 8];
    for v in values.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
        if !v.is_finite() {
            return Err(Error::Format("non-finite payload entry".into()));
        }
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TorusGeometry;
    use std::f64::consts::PI;

    fn grid1(n_t: usize, n_x: usize) -> SpaceTimeGrid {
        let geom = TorusGeometry::new(1, 1, 1).unwrap();
        SpaceTimeGrid::new(geom, 1.0, n_t, n_x).unwrap()
    }

    #[test]
    fn gradient_of_constant_vanishes() {
        let f = ScalarField::from_fn(grid1(3, 16), FieldRole::Generic, |_, _| 4.2).unwrap();
        assert!(f.gradient_x(1).iter().all(|&g| g == 0.0));
        assert!(f.hessian_x(1).iter().all(|&h| h == 0.0));
    }

    #[test]
    fn gradient_of_sine_matches_taylor_bound() {
        let g = grid1(2, 64);
        let f = ScalarField::from_fn(g, FieldRole::Generic, |_, x| (2.0 * PI * x[0]).sin()).unwrap();
        let grad = f.gradient_x(0);
        let dx = g.dx();
        let bound = (2.0 * PI).powi(3) * dx * dx / 6.0;
        let mut x = [0.0];
        for s in 0..g.n_cells() {
            g.node_position(s, &mut x);
            let exact = 2.0 * PI * (2.0 * PI * x[0]).cos();
            assert!(
                (grad[s] - exact).abs() < bound,
                "node {s}: err {} vs bound {bound}",
                (grad[s] - exact).abs()
            );
        }
    }

    #[test]
    fn hessian_of_sine_is_second_order() {
        let g = grid1(2, 64);
        let f = ScalarField::from_fn(g, FieldRole::Generic, |_, x| (2.0 * PI * x[0]).sin()).unwrap();
        let hess = f.hessian_x(0);
        let mut x = [0.0];
        let mut worst: f64 = 0.0;
        for s in 0..g.n_cells() {
            g.node_position(s, &mut x);
            let exact = -4.0 * PI * PI * (2.0 * PI * x[0]).sin();
            worst = worst.max((hess[s] - exact).abs());
        }
        // O(dx^2): (2 pi)^4 dx^2 / 12 ~ 0.03
        assert!(worst < 0.05, "worst hessian error {worst}");
    }

    #[test]
    fn gradient_is_linear_operator() {
        let g = grid1(2, 16);
        let f1 = ScalarField::from_fn(g, FieldRole::Generic, |_, x| (2.0 * PI * x[0]).sin()).unwrap();
        let f2 = ScalarField::from_fn(g, FieldRole::Generic, |_, x| (4.0 * PI * x[0]).cos()).unwrap();
        let combo = ScalarField::from_fn(g, FieldRole::Generic, |_, x| {
            2.0 * (2.0 * PI * x[0]).sin() - 0.5 * (4.0 * PI * x[0]).cos()
        })
        .unwrap();
        let ga = f1.gradient_x(0);
        let gb = f2.gradient_x(0);
        let gc = combo.gradient_x(0);
        for s in 0..g.n_cells() {
            assert!((gc[s] - (2.0 * ga[s] - 0.5 * gb[s])).abs() < 1e-13);
        }
    }

    #[test]
    fn mixed_hessian_is_symmetric_exactly() {
        let geom = TorusGeometry::new(2, 1, 1).unwrap();
        let g = SpaceTimeGrid::new(geom, 1.0, 2, 8).unwrap();
        let f = ScalarField::from_fn(g, FieldRole::Generic, |_, x| {
            (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).cos()
        })
        .unwrap();
        let h = f.hessian_x(0);
        for s in 0..g.n_cells() {
            assert_eq!(h[s * 4 + 1], h[s * 4 + 2]);
        }
    }

    #[test]
    fn discrete_integration_by_parts_on_torus() {
        // <grad f, g> = -<f, grad g> for central differences, no boundary terms.
        let g = grid1(2, 32);
        let f = ScalarField::from_fn(g, FieldRole::Generic, |_, x| (2.0 * PI * x[0]).sin() + 0.3)
            .unwrap();
        let h = ScalarField::from_fn(g, FieldRole::Generic, |_, x| (4.0 * PI * x[0]).cos() - 0.1)
            .unwrap();
        let gf = f.gradient_x(0);
        let gh = h.gradient_x(0);
        let lhs: f64 = (0..g.n_cells()).map(|s| gf[s] * h.slice(0)[s]).sum();
        let rhs: f64 = (0..g.n_cells()).map(|s| f.slice(0)[s] * gh[s]).sum();
        assert!((lhs + rhs).abs() < 1e-12, "ibp defect {}", lhs + rhs);
    }

    #[test]
    fn interpolation_hits_grid_nodes_exactly() {
        let g = grid1(4, 8);
        let f = ScalarField::from_fn(g, FieldRole::Generic, |t, x| t + 10.0 * x[0]).unwrap();
        for level in 0..g.n_t {
            for s in 0..g.n_cells() {
                let mut x = [0.0];
                g.node_position(s, &mut x);
                let v = f.interpolate(g.time(level), &x).unwrap();
                assert_eq!(v, f.slice(level)[s]);
            }
        }
    }

    #[test]
    fn interpolation_midpoint_and_wrap() {
        let g = grid1(2, 8);
        let mut f = ScalarField::zeros(g, FieldRole::Generic);
        // nodes 0..8 at x = j/8; set node 0 -> 4, node 7 -> 2 on both levels
        for level in 0..2 {
            f.slice_mut(level)[0] = 4.0;
            f.slice_mut(level)[7] = 2.0;
        }
        // midpoint between node 7 (x=0.875) and node 0 (x=1.0 == 0.0), wraps
        let v = f.interpolate(0.5, &[1.0 - 0.5 * g.dx()]).unwrap();
        assert!((v - 3.0).abs() < 1e-14);
    }

    #[test]
    fn interpolation_rejects_time_outside_horizon() {
        let g = grid1(2, 8);
        let f = ScalarField::zeros(g, FieldRole::Generic);
        assert!(f.interpolate(-0.1, &[0.0]).is_err());
        assert!(f.interpolate(1.1, &[0.0]).is_err());
    }

    #[test]
    fn interpolation_reproduces_multilinear_fields() {
        // A field that is linear within every cell is reproduced exactly.
        let g = grid1(3, 8);
        let f = ScalarField::from_fn(g, FieldRole::Generic, |t, _| 2.0 * t - 1.0).unwrap();
        let rng = crate::rng::CounterRng::new(5);
        for i in 0..50 {
            let t = rng.uniform(crate::rng::purpose::PROBE, i, 0, 0) * g.horizon;
            let x = [rng.uniform(crate::rng::purpose::PROBE, i, 1, 0)];
            let v = f.interpolate(t, &x).unwrap();
            assert!((v - (2.0 * t - 1.0)).abs() < 1e-13);
        }
    }

    #[test]
    fn l2_norm_of_constant_and_sine() {
        let g = grid1(9, 64);
        let c = ScalarField::from_fn(g, FieldRole::Generic, |_, _| -2.5).unwrap();
        assert!((c.l2_norm() - 2.5 * g.horizon.sqrt()).abs() < 1e-12);

        let zero = ScalarField::zeros(g, FieldRole::Generic);
        assert_eq!(zero.l2_norm(), 0.0);

        let s = ScalarField::from_fn(g, FieldRole::Generic, |_, x| (2.0 * PI * x[0]).sin()).unwrap();
        // rectangle rule is exact for sin^2 on a periodic grid
        assert!((s.l2_norm() - (g.horizon / 2.0).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn h2_norm_of_sine_mode() {
        let g = grid1(9, 128);
        let s = ScalarField::from_fn(g, FieldRole::Generic, |_, x| (2.0 * PI * x[0]).sin()).unwrap();
        let c = ScalarField::from_fn(g, FieldRole::Generic, |_, _| 3.0).unwrap();
        assert!((c.h2_norm() - 3.0 * g.horizon.sqrt()).abs() < 1e-12);
        let p2 = 4.0 * PI * PI;
        let exact = (g.horizon * (1.0 + p2 + p2 * p2) / 2.0).sqrt();
        assert!(
            (s.h2_norm() - exact).abs() / exact < 0.01,
            "h2 {} vs exact {exact}",
            s.h2_norm()
        );
    }

    #[test]
    fn derivative_error_shrinks_at_second_order() {
        // halving dx shrinks gradient/hessian errors by >= 3.5x
        let err_at = |n_x: usize| {
            let g = grid1(2, n_x);
            let f =
                ScalarField::from_fn(g, FieldRole::Generic, |_, x| (2.0 * PI * x[0]).sin()).unwrap();
            let grad = f.gradient_x(0);
            let hess = f.hessian_x(0);
            let mut x = [0.0];
            let mut eg: f64 = 0.0;
            let mut eh: f64 = 0.0;
            for s in 0..g.n_cells() {
                g.node_position(s, &mut x);
                eg = eg.max((grad[s] - 2.0 * PI * (2.0 * PI * x[0]).cos()).abs());
                eh = eh.max((hess[s] + 4.0 * PI * PI * (2.0 * PI * x[0]).sin()).abs());
            }
            (eg, eh)
        };
        let (g32, h32) = err_at(32);
        let (g64, h64) = err_at(64);
        assert!(g32 / g64 >= 3.5, "gradient ratio {}", g32 / g64);
        assert!(h32 / h64 >= 3.5, "hessian ratio {}", h32 / h64);
    }

    #[test]
    fn dump_round_trip() {
        let dir = std::env::temp_dir().join("pgflow_field_test");
        std::fs::create_dir_all(&dir).unwrap();
        let g = grid1(3, 8);
        let f = ScalarField::from_fn(g, FieldRole::Value, |t, x| t * x[0] + 1.0).unwrap();
        let path = dir.join("v.bin");
        f.dump(&path).unwrap();
        let back = ScalarField::load(&path, g.horizon).unwrap();
        assert_eq!(back.role, FieldRole::Value);
        assert_eq!(back.values(), f.values());

        let u = ControlField::from_fn(g, |t, x, out| out[0] = t - x[0]).unwrap();
        let upath = dir.join("u.bin");
        u.dump(&upath).unwrap();
        let uback = ControlField::load(&upath, g.horizon).unwrap();
        assert_eq!(uback.values(), u.values());
    }

    #[test]
    fn load_rejects_malformed_dumps() {
        let dir = std::env::temp_dir().join("pgflow_field_badmagic");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.bin");
        std::fs::write(&path, b"NOTMAGIC\x01\x00\x00\x00").unwrap();
        assert!(matches!(ScalarField::load(&path, 1.0), Err(crate::error::Error::Format(_))));
        // a scalar dump is not a control dump
        let g = grid1(3, 8);
        let f = ScalarField::from_fn(g, FieldRole::Value, |t, x| t + x[0]).unwrap();
        let vpath = dir.join("v.bin");
        f.dump(&vpath).unwrap();
        assert!(ControlField::load(&vpath, g.horizon).is_err());
    }

    #[test]
    fn control_box_validation() {
        let g = grid1(3, 8);
        let u = ControlField::constant(g, &[4.0]).unwrap();
        assert!(u.validate_box(5.0).is_ok());
        assert!(matches!(
            u.validate_box(3.0),
            Err(crate::error::Error::BoxViolation { .. })
        ));
    }

    #[test]
    fn control_field_interpolation_and_norm() {
        let g = grid1(3, 8);
        let u = ControlField::constant(g, &[0.75]).unwrap();
        let mut out = [0.0];
        u.interpolate_into(0.37, &[0.61], &mut out).unwrap();
        assert!((out[0] - 0.75).abs() < 1e-15);
        assert!((u.l2_norm() - 0.75 * g.horizon.sqrt()).abs() < 1e-12);
    }
}
