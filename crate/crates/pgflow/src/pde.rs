//! The two linear parabolic solves the method is built on: backward policy
//! evaluation of the value function and forward transport of the state
//! density, plus the fundamental solution used by the value-sensitivity
//! formula.
//!
//! Both solvers are explicit in time with automatic CFL sub-stepping. Between
//! two stored levels the control is piecewise linear in time. Sub-stepping is
//! cheap at desk scale and keeps the schemes monotone, which the comparison
//! checks rely on.

use crate::error::{Error, Result};
use crate::field::{slice_gradient, slice_hessian, ControlField, FieldRole, ScalarField};
use crate::problem::{CoState, ProblemSpec, Scratch};

#[derive(Clone, Copy, Debug)]
pub struct SolverConfig {
    /// Safety fraction of the explicit stability bound, in (0, 1].
    pub cfl_safety: f64,
    /// Cap on substeps per stored level before reporting a CFL failure.
    pub max_substeps_per_level: usize,
    /// Allowed drift of the spatial mean over the whole horizon.
    pub mass_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { cfl_safety: 0.4, max_substeps_per_level: 1024, mass_tolerance: 1e-8 }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "cfl_safety must lie in (0,1], got {}",
                self.cfl_safety
            )));
        }
        if self.mass_tolerance <= 0.0 {
            return Err(Error::InvalidArgument("mass_tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveKind {
    Hj,
    Fp,
}

/// Machine-readable record of one solve; serializes as one CSV row.
#[derive(Clone, Debug)]
pub struct SolveReport {
    pub kind: SolveKind,
    pub substeps_used: usize,
    pub max_substeps_level: usize,
    /// Tightest substep bound encountered (seconds of model time).
    pub cfl_limit: f64,
    pub mass_drift_max: Option<f64>,
    pub min_density: Option<f64>,
    pub positivity_warning: bool,
}

impl SolveReport {
    pub const CSV_HEADER: &'static str = "kind,substeps_used,mass_drift_max,min_density,cfl_limit";

    pub fn csv_row(&self) -> String {
        let kind = match self.kind {
            SolveKind::Hj => "hj",
            SolveKind::Fp => "fp",
        };
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        format!(
            "{kind},{},{},{},{:e}",
            self.substeps_used,
            opt(self.mass_drift_max),
            opt(self.min_density),
            self.cfl_limit
        )
    }
}

/// Shared per-solve workspace: node coordinates and coefficient buffers.
struct LevelBuffers {
    positions: Vec<f64>,
    u_node: Vec<f64>,
    cs: CoState,
    ws: Scratch,
}

impl LevelBuffers {
    fn new(spec: &ProblemSpec, grid: &crate::grid::SpaceTimeGrid) -> Self {
        let n = spec.geometry.dim_state;
        let n_cells = grid.n_cells();
        let mut positions = vec![0.0; n_cells * n];
        for s in 0..n_cells {
            let (head, tail) = positions.split_at_mut(s * n);
            let _ = head;
            grid.node_position(s, &mut tail[..n]);
        }
        Self {
            positions,
            u_node: vec![0.0; spec.geometry.dim_control],
            cs: CoState::zero(n),
            ws: spec.scratch(),
        }
    }

    fn x(&self, s: usize, n: usize) -> &[f64] {
        &self.positions[s * n..(s + 1) * n]
    }
}

fn check_compatible(spec: &ProblemSpec, u: &ControlField) -> Result<()> {
    if spec.geometry != u.grid.geometry {
        return Err(Error::DimensionMismatch(
            "control field geometry does not match the problem".into(),
        ));
    }
    if !u.is_finite() {
        return Err(Error::Numeric("control field has non-finite entries".into()));
    }
    Ok(())
}

/// Largest diagonal entry of `D` over one slice at the controls stored on the
/// two bounding levels; drives the diffusive CFL bound.
fn slice_d_max(
    spec: &ProblemSpec,
    u: &ControlField,
    levels: (usize, usize),
    times: (f64, f64),
    buf: &mut LevelBuffers,
) -> f64 {
    let n = spec.geometry.dim_state;
    let mut d_max = 0.0f64;
    for (level, t) in [(levels.0, times.0), (levels.1, times.1)] {
        for s in 0..u.grid.n_cells() {
            let x = &buf.positions[s * n..(s + 1) * n];
            spec.d_into(t, x, u.node(level, s), &mut buf.ws.sigma, &mut buf.ws.d);
            for i in 0..n {
                d_max = d_max.max(buf.ws.d[i * n + i]);
            }
        }
    }
    d_max
}

/// Largest `|b_i|` over one slice at the controls stored on the two bounding
/// levels; drives the advective CFL bound of the density solver.
fn slice_b_max(
    spec: &ProblemSpec,
    u: &ControlField,
    levels: (usize, usize),
    times: (f64, f64),
    buf: &mut LevelBuffers,
) -> f64 {
    let n = spec.geometry.dim_state;
    let mut b_max = 0.0f64;
    for (level, t) in [(levels.0, times.0), (levels.1, times.1)] {
        for s in 0..u.grid.n_cells() {
            let x = &buf.positions[s * n..(s + 1) * n];
            (spec.drift)(t, x, u.node(level, s), &mut buf.ws.b);
            for i in 0..n {
                b_max = b_max.max(buf.ws.b[i].abs());
            }
        }
    }
    b_max
}

fn substep_count(dt: f64, bound: f64, cap: usize) -> Result<usize> {
    let needed = if bound.is_finite() && bound > 0.0 {
        (dt / bound).ceil().max(1.0) as usize
    } else {
        1
    };
    if needed > cap {
        return Err(Error::CflFailure { needed, cap });
    }
    Ok(needed)
}

/// Backward policy evaluation: march the value function from the terminal
/// condition down to `t = 0` with explicit updates `dV/dt = G(t, x, u, -grad V,
/// -hess V)`, sub-stepped so every substep satisfies
/// `dt_sub <= cfl * dx^2 / (2 n D_max)`.
pub fn solve_hj(
    spec: &ProblemSpec,
    u: &ControlField,
    cfg: &SolverConfig,
) -> Result<(ScalarField, SolveReport)> {
    cfg.validate()?;
    check_compatible(spec, u)?;
    let grid = u.grid;
    let n = spec.geometry.dim_state;
    let n_cells = grid.n_cells();
    let dx = grid.dx();
    let dt = grid.dt();

    let mut buf = LevelBuffers::new(spec, &grid);
    let mut v = ScalarField::zeros(grid, FieldRole::Value);
    for s in 0..n_cells {
        let h = (spec.terminal_cost)(buf.x(s, n));
        if !h.is_finite() {
            return Err(Error::Numeric(format!("terminal cost at node {s}")));
        }
        v.slice_mut(grid.n_t - 1)[s] = h;
    }

    let mut cur = vec![0.0; n_cells];
    let mut next = vec![0.0; n_cells];
    let mut grad = vec![0.0; n_cells * n];
    let mut hess = vec![0.0; n_cells * n * n];

    let mut substeps_used = 0;
    let mut max_substeps_level = 0;
    let mut cfl_limit = f64::INFINITY;

    for k in (1..grid.n_t).rev() {
        let t_hi = grid.time(k);
        let t_lo = grid.time(k - 1);
        let d_max = slice_d_max(spec, u, (k - 1, k), (t_lo, t_hi), &mut buf);
        let bound = if d_max > 0.0 {
            cfg.cfl_safety * dx * dx / (2.0 * n as f64 * d_max)
        } else {
            f64::INFINITY
        };
        cfl_limit = cfl_limit.min(bound);
        let n_sub = substep_count(dt, bound, cfg.max_substeps_per_level)?;
        substeps_used += n_sub;
        max_substeps_level = max_substeps_level.max(n_sub);
        let dt_sub = dt / n_sub as f64;

        cur.copy_from_slice(v.slice(k));
        for j in 0..n_sub {
            let tau = t_hi - j as f64 * dt_sub;
            let theta = ((tau - t_lo) / dt).clamp(0.0, 1.0);
            slice_gradient(&grid, &cur, &mut grad);
            slice_hessian(&grid, &cur, &mut hess);
            for s in 0..n_cells {
                for c in 0..spec.geometry.dim_control {
                    let lo = u.node(k - 1, s)[c];
                    let hi = u.node(k, s)[c];
                    buf.u_node[c] = (1.0 - theta) * lo + theta * hi;
                }
                for i in 0..n {
                    buf.cs.p[i] = -grad[s * n + i];
                }
                for i in 0..n * n {
                    buf.cs.big_p[i] = -hess[s * n * n + i];
                }
                let x = &buf.positions[s * n..(s + 1) * n];
                let g = spec.eval_g_scratch(tau, x, &buf.u_node, &buf.cs, &mut buf.ws)?;
                let val = cur[s] - dt_sub * g;
                if !val.is_finite() {
                    return Err(Error::Numeric(format!("value update at level {k}, node {s}")));
                }
                next[s] = val;
            }
            std::mem::swap(&mut cur, &mut next);
        }
        v.slice_mut(k - 1).copy_from_slice(&cur);
    }

    let report = SolveReport {
        kind: SolveKind::Hj,
        substeps_used,
        max_substeps_level,
        cfl_limit,
        mass_drift_max: None,
        min_density: None,
        positivity_warning: false,
    };
    Ok((v, report))
}

/// Forward density transport in conservative flux form, starting from the
/// slice `rho0` at level `start`. Central face averages for the advective
/// flux and nested divided differences for `d_i d_j (D_ij rho)` telescope on
/// the torus, so the spatial mean is preserved to rounding per step.
fn solve_fp_from(
    spec: &ProblemSpec,
    u: &ControlField,
    rho0: &[f64],
    start: usize,
    cfg: &SolverConfig,
) -> Result<(ScalarField, SolveReport)> {
    cfg.validate()?;
    check_compatible(spec, u)?;
    let grid = u.grid;
    let n = spec.geometry.dim_state;
    let n_cells = grid.n_cells();
    let dx = grid.dx();
    let dt = grid.dt();
    if rho0.len() != n_cells {
        return Err(Error::DimensionMismatch(format!(
            "initial density has {} entries, grid has {n_cells} nodes",
            rho0.len()
        )));
    }
    if start >= grid.n_t {
        return Err(Error::InvalidArgument(format!("start level {start} out of range")));
    }
    let mean0 = rho0.iter().sum::<f64>() / n_cells as f64;
    if (mean0 - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidArgument(format!(
            "initial density mean must be 1 (uniform mass convention), got {mean0}"
        )));
    }
    if rho0.iter().cloned().fold(f64::INFINITY, f64::min) < -1e-12 {
        return Err(Error::InvalidArgument("initial density has negative entries".into()));
    }

    let mut buf = LevelBuffers::new(spec, &grid);
    let mut rho = ScalarField::zeros(grid, FieldRole::Density);
    rho.slice_mut(start).copy_from_slice(rho0);

    let mut cur = rho0.to_vec();
    let mut next = vec![0.0; n_cells];
    // per-node advective flux density b_a rho and diffusive load D_ab rho
    let mut b_rho = vec![0.0; n_cells * n];
    let mut d_rho = vec![0.0; n_cells * n * n];

    let mut substeps_used = 0;
    let mut max_substeps_level = 0;
    let mut cfl_limit = f64::INFINITY;
    let mut mass_drift_max = 0.0f64;
    let mut min_density = cur.iter().cloned().fold(f64::INFINITY, f64::min);

    let inv2dx = 0.5 / dx;
    let inv_dx2 = 1.0 / (dx * dx);

    for k in start..grid.n_t - 1 {
        let t_lo = grid.time(k);
        let t_hi = grid.time(k + 1);
        let d_max = slice_d_max(spec, u, (k, k + 1), (t_lo, t_hi), &mut buf);
        let b_max = slice_b_max(spec, u, (k, k + 1), (t_lo, t_hi), &mut buf);
        let diff_bound = if d_max > 0.0 {
            cfg.cfl_safety * dx * dx / (2.0 * n as f64 * d_max)
        } else {
            f64::INFINITY
        };
        let adv_bound = cfg.cfl_safety * dx / (b_max + 1e-300);
        let bound = diff_bound.min(adv_bound);
        cfl_limit = cfl_limit.min(bound);
        let n_sub = substep_count(dt, bound, cfg.max_substeps_per_level)?;
        substeps_used += n_sub;
        max_substeps_level = max_substeps_level.max(n_sub);
        let dt_sub = dt / n_sub as f64;

        for j in 0..n_sub {
            let tau = t_lo + j as f64 * dt_sub;
            let theta = ((tau - t_lo) / dt).clamp(0.0, 1.0);
            // coefficient loads at the current substep
            for s in 0..n_cells {
                for c in 0..spec.geometry.dim_control {
                    let lo = u.node(k, s)[c];
                    let hi = u.node(k + 1, s)[c];
                    buf.u_node[c] = (1.0 - theta) * lo + theta * hi;
                }
                let x = &buf.positions[s * n..(s + 1) * n];
                (spec.drift)(tau, x, &buf.u_node, &mut buf.ws.b);
                spec.d_into(tau, x, &buf.u_node, &mut buf.ws.sigma, &mut buf.ws.d);
                for a in 0..n {
                    b_rho[s * n + a] = buf.ws.b[a] * cur[s];
                }
                for ab in 0..n * n {
                    d_rho[s * n * n + ab] = buf.ws.d[ab] * cur[s];
                }
            }
            for s in 0..n_cells {
                let mut rate = 0.0;
                for a in 0..n {
                    let up = grid.shift(s, a, 1);
                    let dn = grid.shift(s, a, -1);
                    // -d_a (b_a rho), central flux differences
                    rate -= (b_rho[up * n + a] - b_rho[dn * n + a]) * inv2dx;
                    // d_a d_a (D_aa rho)
                    rate += (d_rho[up * n * n + a * n + a] - 2.0 * d_rho[s * n * n + a * n + a]
                        + d_rho[dn * n * n + a * n + a])
                        * inv_dx2;
                    for b in 0..n {
                        if b == a {
                            continue;
                        }
                        let pp = grid.shift(up, b, 1);
                        let pm = grid.shift(up, b, -1);
                        let mp = grid.shift(dn, b, 1);
                        let mm = grid.shift(dn, b, -1);
                        rate += (d_rho[pp * n * n + a * n + b] - d_rho[pm * n * n + a * n + b]
                            - d_rho[mp * n * n + a * n + b]
                            + d_rho[mm * n * n + a * n + b])
                            * 0.25
                            * inv_dx2;
                    }
                }
                let val = cur[s] + dt_sub * rate;
                if !val.is_finite() {
                    return Err(Error::Numeric(format!("density update at level {k}, node {s}")));
                }
                next[s] = val;
            }
            std::mem::swap(&mut cur, &mut next);
        }
        let mean = cur.iter().sum::<f64>() / n_cells as f64;
        mass_drift_max = mass_drift_max.max((mean - mean0).abs());
        min_density = min_density.min(cur.iter().cloned().fold(f64::INFINITY, f64::min));
        rho.slice_mut(k + 1).copy_from_slice(&cur);
    }

    if mass_drift_max > cfg.mass_tolerance {
        return Err(Error::ConservationFailure { drift: mass_drift_max, tol: cfg.mass_tolerance });
    }
    let report = SolveReport {
        kind: SolveKind::Fp,
        substeps_used,
        max_substeps_level,
        cfl_limit,
        mass_drift_max: Some(mass_drift_max),
        min_density: Some(min_density),
        // undershoots are flagged, never clipped: clipping would silently
        // break mass conservation
        positivity_warning: min_density < -1e-6,
    };
    Ok((rho, report))
}

/// Forward Fokker-Planck transport from the initial density at `t = 0`.
pub fn solve_fp(
    spec: &ProblemSpec,
    u: &ControlField,
    rho0: &[f64],
    cfg: &SolverConfig,
) -> Result<(ScalarField, SolveReport)> {
    solve_fp_from(spec, u, rho0, 0, cfg)
}

/// Discrete fundamental solution `p(t, x; s, y)`: density transport started
/// from the grid delta (mass `1/dx^n` at node `y`) at level `s_level`.
/// Levels before `s_level` are zero-filled. Profiles are meaningful once
/// `t - s >= 10 dx^2`; the single-node spike is the standard grid surrogate
/// for the distributional initial condition.
pub fn fundamental_solution(
    spec: &ProblemSpec,
    u: &ControlField,
    s_level: usize,
    y: usize,
    cfg: &SolverConfig,
) -> Result<(ScalarField, SolveReport)> {
    let grid = u.grid;
    let n_cells = grid.n_cells();
    if y >= n_cells {
        return Err(Error::InvalidArgument(format!("node index {y} out of range")));
    }
    let mut delta = vec![0.0; n_cells];
    delta[y] = 1.0 / grid.cell_volume();
    solve_fp_from(spec, u, &delta, s_level, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TorusGeometry;
    use crate::grid::SpaceTimeGrid;
    use crate::problem::{scalar_fn, tensor_fn};
    use crate::problems::build_problem;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn grid1(horizon: f64, n_t: usize, n_x: usize) -> SpaceTimeGrid {
        let geom = TorusGeometry::new(1, 1, 1).unwrap();
        SpaceTimeGrid::new(geom, horizon, n_t, n_x).unwrap()
    }

    /// Scalar heat-equation instrument: b = 0, D = 1, costs configurable.
    fn heat_problem(r: f64, h: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> ProblemSpec {
        ProblemSpec {
            geometry: TorusGeometry::new(1, 1, 1).unwrap(),
            name: "heat".into(),
            drift: tensor_fn(|_, _, out| out[0] = 0.0),
            diffusion: tensor_fn(|_, _, out| out[0] = 2.0f64.sqrt()),
            running_cost: scalar_fn(move |_, _| r),
            terminal_cost: Arc::new(h),
            grad_u_drift: tensor_fn(|_, _, out| out[0] = 0.0),
            grad_u_diffusion: tensor_fn(|_, _, out| out[0] = 0.0),
            grad_u_running_cost: tensor_fn(|_, _, out| out[0] = 0.0),
            sigma0: 1.0,
            mu_g: 0.0,
            bound_k: 1.0,
            u_box: 5.0,
        }
    }

    #[test]
    fn constant_terminal_no_running_cost_stays_constant() {
        let g = grid1(0.3, 7, 16);
        let spec = heat_problem(0.0, |_| 2.5);
        let u = ControlField::constant(g, &[0.7]).unwrap();
        let (v, _) = solve_hj(&spec, &u, &SolverConfig::default()).unwrap();
        for level in 0..g.n_t {
            for &val in v.slice(level) {
                assert!((val - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_running_cost_gives_time_to_go() {
        let g = grid1(0.3, 7, 16);
        let spec = heat_problem(1.0, |_| 0.0);
        let u = ControlField::zeros(g);
        let (v, _) = solve_hj(&spec, &u, &SolverConfig::default()).unwrap();
        for level in 0..g.n_t {
            let expect = g.horizon - g.time(level);
            for &val in v.slice(level) {
                assert!((val - expect).abs() < 1e-10, "level {level}: {val} vs {expect}");
            }
        }
    }

    #[test]
    fn comparison_principle_orders_values() {
        // r1 <= r2 and h1 <= h2 pointwise implies V1 <= V2 everywhere for the
        // monotone explicit scheme.
        let g = grid1(0.2, 6, 24);
        let s1 = heat_problem(0.0, |x| (2.0 * PI * x[0]).cos() * 0.3);
        let s2 = heat_problem(0.25, |x| (2.0 * PI * x[0]).cos() * 0.3 + 0.1);
        let u = ControlField::constant(g, &[0.4]).unwrap();
        let (v1, _) = solve_hj(&s1, &u, &SolverConfig::default()).unwrap();
        let (v2, _) = solve_hj(&s2, &u, &SolverConfig::default()).unwrap();
        for (a, b) in v1.values().iter().zip(v2.values()) {
            assert!(a <= &(b + 1e-8));
        }
    }

    #[test]
    fn cfl_failure_reports_needed_substeps() {
        let g = grid1(0.3, 3, 64);
        let spec = heat_problem(0.0, |_| 0.0);
        let u = ControlField::zeros(g);
        let cfg = SolverConfig { max_substeps_per_level: 10, ..Default::default() };
        match solve_hj(&spec, &u, &cfg) {
            Err(Error::CflFailure { needed, cap }) => {
                assert!(needed > 10);
                assert_eq!(cap, 10);
            }
            other => panic!("expected CFL failure, got {other:?}"),
        }
    }

    #[test]
    fn uniform_density_is_stationary_without_drift() {
        let g = grid1(0.25, 6, 16);
        let spec = heat_problem(0.0, |_| 0.0);
        let u = ControlField::zeros(g);
        let rho0 = vec![1.0; g.n_cells()];
        let (rho, report) = solve_fp(&spec, &u, &rho0, &SolverConfig::default()).unwrap();
        for level in 0..g.n_t {
            for &val in rho.slice(level) {
                assert!((val - 1.0).abs() < 1e-12);
            }
        }
        assert!(report.mass_drift_max.unwrap() < 1e-12);
        assert!(!report.positivity_warning);
    }

    #[test]
    fn heat_mode_decays_at_fourier_rate() {
        // rho0 = 1 + cos(2 pi x)/2 decays to 1 + exp(-4 pi^2 t) cos(2 pi x)/2
        let g = grid1(0.05, 11, 128);
        let spec = heat_problem(0.0, |_| 0.0);
        let u = ControlField::zeros(g);
        let mut rho0 = vec![0.0; g.n_cells()];
        let mut x = [0.0];
        for s in 0..g.n_cells() {
            g.node_position(s, &mut x);
            rho0[s] = 1.0 + 0.5 * (2.0 * PI * x[0]).cos();
        }
        let (rho, _) = solve_fp(&spec, &u, &rho0, &SolverConfig::default()).unwrap();
        let t = g.horizon;
        let mut worst: f64 = 0.0;
        for s in 0..g.n_cells() {
            g.node_position(s, &mut x);
            let exact = 1.0 + 0.5 * (-4.0 * PI * PI * t).exp() * (2.0 * PI * x[0]).cos();
            worst = worst.max((rho.slice(g.n_t - 1)[s] - exact).abs() / exact);
        }
        assert!(worst < 0.01, "relative error {worst}");
    }

    #[test]
    fn mass_is_conserved_under_advection() {
        // genuine drift through the quartic problem at a nonzero control
        let built = build_problem("quartic_trap").unwrap();
        let g = grid1(built.default_horizon, 9, 32);
        let u = ControlField::constant(g, &[1.3]).unwrap();
        let rho0 = vec![1.0; g.n_cells()];
        let (rho, report) = solve_fp(&built.spec, &u, &rho0, &SolverConfig::default()).unwrap();
        for level in 0..g.n_t {
            assert!((rho.spatial_mean(level) - 1.0).abs() < 1e-8);
        }
        assert!(report.min_density.unwrap() > 0.0);
        rho.validate_density().unwrap();
    }

    #[test]
    fn fundamental_solution_conserves_mass_and_matches_heat_kernel() {
        let g = grid1(0.05, 11, 64);
        let spec = heat_problem(0.0, |_| 0.0);
        let u = ControlField::zeros(g);
        let y = 20;
        let (p, _) = fundamental_solution(&spec, &u, 0, y, &SolverConfig::default()).unwrap();
        for level in 0..g.n_t {
            assert!((p.spatial_mean(level) - 1.0).abs() < 1e-10);
        }
        // wrapped Gaussian with diffusivity D = 1 at the final time
        let t = g.horizon;
        assert!(t >= 10.0 * g.dx() * g.dx());
        let mut xy = [0.0];
        g.node_position(y, &mut xy);
        let mut x = [0.0];
        let mut worst: f64 = 0.0;
        let mut peak: f64 = 0.0;
        for s in 0..g.n_cells() {
            g.node_position(s, &mut x);
            let mut exact = 0.0;
            for k in -8i32..=8 {
                let d = x[0] - xy[0] + k as f64;
                exact += (-d * d / (4.0 * t)).exp() / (4.0 * PI * t).sqrt();
            }
            peak = peak.max(exact);
            worst = worst.max((p.slice(g.n_t - 1)[s] - exact).abs());
        }
        assert!(worst / peak < 0.02, "relative sup error {}", worst / peak);
    }

    #[test]
    fn fundamental_solution_at_terminal_level_is_the_delta() {
        let g = grid1(0.1, 5, 16);
        let spec = heat_problem(0.0, |_| 0.0);
        let u = ControlField::zeros(g);
        let y = 3;
        let (p, _) = fundamental_solution(&spec, &u, g.n_t - 1, y, &SolverConfig::default())
            .unwrap();
        for s in 0..g.n_cells() {
            let expect = if s == y { g.n_x as f64 } else { 0.0 };
            assert_eq!(p.slice(g.n_t - 1)[s], expect);
        }
        // earlier levels zero-filled
        for level in 0..g.n_t - 1 {
            assert!(p.slice(level).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn bellman_duality_spot_check() {
        // J computed as <rho(0), V(0)> equals the running+terminal quadrature
        // against the transported density, up to discretization.
        let built = build_problem("quartic_trap").unwrap();
        let g = grid1(built.default_horizon, 17, 32);
        let spec = &built.spec;
        let u = ControlField::from_fn(g, |t, x, out| {
            out[0] = 0.8 + 0.3 * (2.0 * PI * x[0]).sin() - 0.2 * t;
        })
        .unwrap();
        let cfg = SolverConfig::default();
        let (v, _) = solve_hj(spec, &u, &cfg).unwrap();
        let rho0 = vec![1.0; g.n_cells()];
        let (rho, _) = solve_fp(spec, &u, &rho0, &cfg).unwrap();

        let cell = g.cell_volume();
        let j_value: f64 =
            v.slice(0).iter().zip(rho.slice(0)).map(|(a, b)| a * b * cell).sum();

        // duality side: trapezoid in time of <r, rho> plus <h, rho(T)>
        let mut x = [0.0];
        let mut j_dual = 0.0;
        for level in 0..g.n_t {
            let t = g.time(level);
            let w = if level == 0 || level == g.n_t - 1 { 0.5 } else { 1.0 };
            let mut acc = 0.0;
            for s in 0..g.n_cells() {
                g.node_position(s, &mut x);
                acc += (spec.running_cost)(t, &x, u.node(level, s)) * rho.slice(level)[s];
            }
            j_dual += w * g.dt() * acc * cell;
        }
        for s in 0..g.n_cells() {
            g.node_position(s, &mut x);
            j_dual += (spec.terminal_cost)(&x) * rho.slice(g.n_t - 1)[s] * cell;
        }

        let tol = 10.0 * (g.dt() + g.dx() * g.dx());
        assert!(
            (j_value - j_dual).abs() < tol,
            "duality gap {} vs tol {tol}",
            (j_value - j_dual).abs()
        );
    }

    #[test]
    fn hj_error_shrinks_under_refinement() {
        // manufactured problem at its optimal control: the sampled closed-form
        // value function is the exact solution.
        let built = build_problem("manufactured_concave").unwrap();
        let oracle = built.oracle.as_ref().unwrap();
        let err_at = |n_t: usize, n_x: usize| {
            let g = grid1(built.default_horizon, n_t, n_x);
            let u = oracle.u_star_field(g).unwrap();
            let (v, _) = solve_hj(&built.spec, &u, &SolverConfig::default()).unwrap();
            let v_exact = oracle.v_star_field(g).unwrap();
            v.max_abs_diff(&v_exact)
        };
        let coarse = err_at(9, 16);
        let fine = err_at(33, 32);
        assert!(
            coarse / fine >= 3.0,
            "refinement ratio {} (coarse {coarse}, fine {fine})",
            coarse / fine
        );
    }

    /// Two-dimensional instrument with anisotropic noise: sigma = [[1, 1],
    /// [0, 1]] gives D = [[1, .5], [.5, .5]], so the mixed-derivative parts
    /// of both stencils carry real weight.
    fn anisotropic_2d() -> ProblemSpec {
        ProblemSpec {
            geometry: TorusGeometry::new(2, 1, 2).unwrap(),
            name: "aniso2d".into(),
            drift: tensor_fn(|_, _, out| out.fill(0.0)),
            diffusion: tensor_fn(|_, _, out| out.copy_from_slice(&[1.0, 1.0, 0.0, 1.0])),
            running_cost: scalar_fn(|_, _| 0.0),
            terminal_cost: Arc::new(|x| (2.0 * PI * (x[0] + x[1])).cos()),
            grad_u_drift: tensor_fn(|_, _, out| out.fill(0.0)),
            grad_u_diffusion: tensor_fn(|_, _, out| out.fill(0.0)),
            grad_u_running_cost: tensor_fn(|_, _, out| out.fill(0.0)),
            sigma0: 0.2,
            mu_g: 0.0,
            bound_k: 2.0,
            u_box: 5.0,
        }
    }

    #[test]
    fn anisotropic_mode_decay_exercises_mixed_terms() {
        // For the plane-wave mode cos(2 pi (x + y)) both equations reduce to
        // exponential decay at rate lambda = 4 pi^2 (D11 + 2 D12 + D22).
        let spec = anisotropic_2d();
        let geom = spec.geometry;
        let horizon = 0.02;
        let g = SpaceTimeGrid::new(geom, horizon, 9, 24).unwrap();
        let u = ControlField::zeros(g);
        let lambda = 4.0 * PI * PI * (1.0 + 2.0 * 0.5 + 0.5);

        // backward value solve: V(t) = exp(-lambda (T - t)) h
        let (v, _) = solve_hj(&spec, &u, &SolverConfig::default()).unwrap();
        let mut x = [0.0; 2];
        let mut worst: f64 = 0.0;
        for level in 0..g.n_t {
            let decay = (-lambda * (horizon - g.time(level))).exp();
            for s in 0..g.n_cells() {
                g.node_position(s, &mut x);
                let exact = decay * (2.0 * PI * (x[0] + x[1])).cos();
                worst = worst.max((v.slice(level)[s] - exact).abs());
            }
        }
        assert!(worst < 0.02, "hj mixed-term error {worst}");

        // forward density transport of the same mode
        let mut rho0 = vec![0.0; g.n_cells()];
        for s in 0..g.n_cells() {
            g.node_position(s, &mut x);
            rho0[s] = 1.0 + 0.5 * (2.0 * PI * (x[0] + x[1])).cos();
        }
        let (rho, report) = solve_fp(&spec, &u, &rho0, &SolverConfig::default()).unwrap();
        let mut worst: f64 = 0.0;
        for level in 0..g.n_t {
            let decay = (-lambda * g.time(level)).exp();
            for s in 0..g.n_cells() {
                g.node_position(s, &mut x);
                let exact = 1.0 + 0.5 * decay * (2.0 * PI * (x[0] + x[1])).cos();
                worst = worst.max((rho.slice(level)[s] - exact).abs());
            }
        }
        assert!(worst < 0.02, "fp mixed-term error {worst}");
        assert!(report.mass_drift_max.unwrap() < 1e-12);
    }

    #[test]
    fn conservation_failure_reported_beyond_tolerance() {
        // an absurdly tight tolerance turns benign rounding drift into the
        // documented conservation error
        let built = build_problem("quartic_trap").unwrap();
        let g = grid1(built.default_horizon, 9, 16);
        let u = ControlField::from_fn(g, |_, x, out| {
            out[0] = 0.9 + 0.4 * (2.0 * PI * x[0]).sin();
        })
        .unwrap();
        let rho0 = vec![1.0; g.n_cells()];
        let cfg = SolverConfig { mass_tolerance: 1e-18, ..Default::default() };
        match solve_fp(&built.spec, &u, &rho0, &cfg) {
            Err(Error::ConservationFailure { drift, tol }) => {
                assert!(drift > tol);
            }
            other => panic!("expected conservation failure, got {other:?}"),
        }
    }

    #[test]
    fn advective_undershoot_is_flagged_not_fatal() {
        // weak diffusion + strong drift on a coarse grid: the central scheme
        // is stable under the advective bound but not monotone, so the spike
        // develops undershoots; they are recorded, never clipped
        let spec = ProblemSpec {
            geometry: TorusGeometry::new(1, 1, 1).unwrap(),
            name: "drifty".into(),
            drift: tensor_fn(|_, _, out| out[0] = 4.0),
            diffusion: tensor_fn(|_, _, out| out[0] = 0.2),
            running_cost: scalar_fn(|_, _| 0.0),
            terminal_cost: Arc::new(|_| 0.0),
            grad_u_drift: tensor_fn(|_, _, out| out[0] = 0.0),
            grad_u_diffusion: tensor_fn(|_, _, out| out[0] = 0.0),
            grad_u_running_cost: tensor_fn(|_, _, out| out[0] = 0.0),
            sigma0: 0.02,
            mu_g: 0.0,
            bound_k: 4.0,
            u_box: 5.0,
        };
        let g = grid1(0.05, 6, 16);
        let u = ControlField::zeros(g);
        let (_, report) = fundamental_solution(&spec, &u, 0, 8, &SolverConfig::default()).unwrap();
        assert!(report.positivity_warning, "expected an undershoot flag");
        assert!(report.min_density.unwrap() < -1e-6);
        assert!(report.mass_drift_max.unwrap() < 1e-8, "mass still conserved");
    }

    #[test]
    fn fp_error_shrinks_under_refinement() {
        let spec = heat_problem(0.0, |_| 0.0);
        let err_at = |n_t: usize, n_x: usize| {
            let g = grid1(0.05, n_t, n_x);
            let u = ControlField::zeros(g);
            let mut rho0 = vec![0.0; g.n_cells()];
            let mut x = [0.0];
            for s in 0..g.n_cells() {
                g.node_position(s, &mut x);
                rho0[s] = 1.0 + 0.5 * (2.0 * PI * x[0]).cos();
            }
            let (rho, _) = solve_fp(&spec, &u, &rho0, &SolverConfig::default()).unwrap();
            let mut worst: f64 = 0.0;
            for level in 0..g.n_t {
                let t = g.time(level);
                for s in 0..g.n_cells() {
                    g.node_position(s, &mut x);
                    let exact =
                        1.0 + 0.5 * (-4.0 * PI * PI * t).exp() * (2.0 * PI * x[0]).cos();
                    worst = worst.max((rho.slice(level)[s] - exact).abs());
                }
            }
            worst
        };
        let coarse = err_at(5, 16);
        let fine = err_at(17, 32);
        assert!(
            coarse / fine >= 3.0,
            "refinement ratio {} (coarse {coarse}, fine {fine})",
            coarse / fine
        );
    }
}
