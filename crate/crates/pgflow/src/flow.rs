//! The policy-gradient flow in algorithmic time: exact functional gradient of
//! the cost, Armijo-damped descent steps, and convergence monitoring.
//!
//! The descent direction is the pointwise product `-rho grad_u G` assembled
//! from the transported density and the value function's field calculus. The
//! raw explicit step carries no step-size rule, so steps are backtracked until
//! the cost actually decreases; this preserves at finite step size the
//! monotonicity the flow has in the continuum. The pointwise value-function
//! monotonicity is likewise enforced only up to a calibrated tolerance,
//! shrinking the step until the observed increase is below it.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{slice_gradient, slice_hessian, ControlField, ScalarField};
use crate::local_opt::{local_optimal_field, ArgmaxConfig};
use crate::pde::{fundamental_solution, solve_fp, solve_hj, SolverConfig};
use crate::problem::{CoState, ProblemSpec};

#[derive(Clone, Debug)]
pub struct FlowConfig {
    /// Algorithmic time step proposed to every flow step.
    pub dtau: f64,
    pub max_steps: usize,
    /// Stop when the gradient norm `|rho grad_u G|_{L2}` falls below this.
    pub stop_grad_norm: f64,
    /// Stall detection: stop when J decreased by less than
    /// `stall_min_decrease` over the last `stall_window` accepted steps.
    pub stall_window: usize,
    pub stall_min_decrease: f64,
    /// Armijo backtracking on top of the plain explicit step.
    pub armijo: bool,
    pub armijo_shrink: f64,
    pub armijo_slope: f64,
    pub max_halvings: usize,
    /// When set, a step is only accepted if the pointwise value-function
    /// increase stays below this tolerance (halving the step otherwise).
    pub v_monotone_tol: Option<f64>,
    pub solver: SolverConfig,
    /// Multistart offsets for the distance-to-local diagnostic; incumbent-only
    /// mode reproduces the flow's local character.
    pub diag_argmax: ArgmaxConfig,
    /// Sample the optimality-equation residual every k accepted steps.
    pub hjb_every: Option<usize>,
}

impl FlowConfig {
    pub fn defaults(dim_control: usize) -> Self {
        Self {
            dtau: 0.5,
            max_steps: 500,
            stop_grad_norm: 1e-6,
            stall_window: 25,
            stall_min_decrease: 1e-12,
            armijo: true,
            armijo_shrink: 0.5,
            armijo_slope: 1e-4,
            max_halvings: 20,
            v_monotone_tol: None,
            solver: SolverConfig::default(),
            diag_argmax: ArgmaxConfig::multistart(dim_control),
            hjb_every: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dtau < 0.0 || !self.dtau.is_finite() {
            return Err(Error::InvalidArgument(format!("dtau must be >= 0, got {}", self.dtau)));
        }
        if !(self.armijo_shrink > 0.0 && self.armijo_shrink < 1.0) {
            return Err(Error::InvalidArgument("armijo_shrink must lie in (0,1)".into()));
        }
        if self.stop_grad_norm <= 0.0 {
            return Err(Error::InvalidArgument("stop_grad_norm must be positive".into()));
        }
        Ok(())
    }
}

/// A consistent snapshot of the flow: the control together with its value
/// function, transported density, cost, and the two convergence monitors.
#[derive(Clone, Debug)]
pub struct FlowState {
    /// Algorithmic time.
    pub tau: f64,
    pub u: ControlField,
    pub v: ScalarField,
    pub rho: ScalarField,
    pub j: f64,
    /// `|rho grad_u G|_{L2}` = L2 norm of the functional gradient.
    pub grad_norm: f64,
    /// `|u - u_diamond|_{L2}` with the configured argmax mode.
    pub dist_to_local: f64,
    /// The functional gradient itself (the descent direction is its negative).
    pub gradient: ControlField,
}

impl FlowState {
    /// Solve both equations for `u` and assemble a consistent state.
    pub fn evaluate(spec: &ProblemSpec, u: ControlField, tau: f64, cfg: &FlowConfig) -> Result<Self> {
        if !u.is_finite() {
            return Err(Error::Numeric("control field has non-finite entries".into()));
        }
        let (v, _) = solve_hj(spec, &u, &cfg.solver)?;
        let rho0 = vec![1.0; u.grid.n_cells()];
        let (rho, _) = solve_fp(spec, &u, &rho0, &cfg.solver)?;
        let j = cost_j(&v, &rho0);
        let gradient = functional_gradient(spec, &u, &v, &rho)?;
        let grad_norm = gradient.l2_norm();
        let (diamond, _) = local_optimal_field(spec, &u, &v, &cfg.diag_argmax)?;
        let dist_to_local = u.l2_distance(&diamond);
        Ok(Self { tau, u, v, rho, j, grad_norm, dist_to_local, gradient })
    }
}

/// Cost with explicit initial density: the spatial quadrature of
/// `rho(0) V(0)`. With the uniform initialization this is the spatial mean of
/// the value function's initial slice.
pub fn cost_j(v: &ScalarField, rho0: &[f64]) -> f64 {
    debug_assert_eq!(v.role, crate::field::FieldRole::Value, "cost takes a value function");
    let cell = v.grid.cell_volume();
    v.slice(0).iter().zip(rho0).map(|(a, b)| a * b * cell).sum()
}

/// Functional gradient `dJ/du(t,x) = -rho(t,x) grad_u G(t, x, u, -grad V,
/// -hess V)`, node by node.
pub fn functional_gradient(
    spec: &ProblemSpec,
    u: &ControlField,
    v: &ScalarField,
    rho: &ScalarField,
) -> Result<ControlField> {
    weighted_gradient(spec, u, v, rho, 0)
}

/// Sensitivity of the value at `(s, y)` to the control: the functional
/// gradient with the fundamental solution started at `(s, y)` in place of the
/// density. Entries at `t < s` are exactly zero.
pub fn value_sensitivity(
    spec: &ProblemSpec,
    u: &ControlField,
    v: &ScalarField,
    s_level: usize,
    y: usize,
    solver: &SolverConfig,
) -> Result<ControlField> {
    let (p, _) = fundamental_solution(spec, u, s_level, y, solver)?;
    weighted_gradient(spec, u, v, &p, s_level)
}

fn weighted_gradient(
    spec: &ProblemSpec,
    u: &ControlField,
    v: &ScalarField,
    weight: &ScalarField,
    start_level: usize,
) -> Result<ControlField> {
    let grid = u.grid;
    if v.grid != grid || weight.grid != grid {
        return Err(Error::DimensionMismatch("fields live on different grids".into()));
    }
    let n = spec.geometry.dim_state;
    let nc = spec.geometry.dim_control;
    let n_cells = grid.n_cells();

    let per_level: Vec<Vec<f64>> = (0..grid.n_t)
        .into_par_iter()
        .map(|level| -> Result<Vec<f64>> {
            let mut out = vec![0.0; n_cells * nc];
            if level < start_level {
                return Ok(out);
            }
            let t = grid.time(level);
            let mut grad = vec![0.0; n_cells * n];
            let mut hess = vec![0.0; n_cells * n * n];
            slice_gradient(&grid, v.slice(level), &mut grad);
            slice_hessian(&grid, v.slice(level), &mut hess);
            let mut cs = CoState::zero(n);
            let mut ws = spec.scratch();
            let mut x = vec![0.0; n];
            let mut g = vec![0.0; nc];
            let w = weight.slice(level);
            for s in 0..n_cells {
                grid.node_position(s, &mut x);
                for i in 0..n {
                    cs.p[i] = -grad[s * n + i];
                }
                for i in 0..n * n {
                    cs.big_p[i] = -hess[s * n * n + i];
                }
                spec.grad_u_g_scratch(t, &x, u.node(level, s), &cs, &mut ws, &mut g)?;
                for c in 0..nc {
                    out[s * nc + c] = -w[s] * g[c];
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut field = ControlField::zeros(grid);
    for (level, vals) in per_level.into_iter().enumerate() {
        let off = level * n_cells * nc;
        field.values_mut()[off..off + n_cells * nc].copy_from_slice(&vals);
    }
    Ok(field)
}

/// Diagnostics of one accepted step.
#[derive(Clone, Copy, Debug)]
pub struct StepDiagnostics {
    pub accepted_dtau: f64,
    pub halvings: usize,
    /// Largest pointwise increase of the value function over the step.
    pub max_v_increase: f64,
}

/// One damped step of the discrete flow: propose `u - dtau dJ/du`, backtrack
/// until the Armijo decrease (and, when configured, the pointwise value
/// monotonicity) holds, then re-solve both equations for the new control.
pub fn flow_step(
    spec: &ProblemSpec,
    state: &FlowState,
    cfg: &FlowConfig,
) -> Result<(FlowState, StepDiagnostics)> {
    cfg.validate()?;
    if cfg.dtau == 0.0 {
        // degenerate step accepted: state unchanged
        let diag = StepDiagnostics { accepted_dtau: 0.0, halvings: 0, max_v_increase: 0.0 };
        return Ok((state.clone(), diag));
    }
    let rho0 = vec![1.0; state.u.grid.n_cells()];
    let gn2 = state.grad_norm * state.grad_norm;
    let mut step = cfg.dtau;
    for halvings in 0..=cfg.max_halvings {
        let mut u_new = state.u.clone();
        u_new.axpy(-step, &state.gradient);
        let (v_new, _) = solve_hj(spec, &u_new, &cfg.solver)?;
        let j_new = cost_j(&v_new, &rho0);
        let max_v_increase = v_new
            .values()
            .iter()
            .zip(state.v.values())
            .fold(f64::NEG_INFINITY, |m, (new, old)| m.max(new - old));
        let armijo_ok = !cfg.armijo || j_new <= state.j - cfg.armijo_slope * step * gn2;
        let v_ok = cfg.v_monotone_tol.is_none_or(|tol| max_v_increase <= tol);
        if armijo_ok && v_ok {
            let (rho_new, _) = solve_fp(spec, &u_new, &rho0, &cfg.solver)?;
            let gradient = functional_gradient(spec, &u_new, &v_new, &rho_new)?;
            let grad_norm = gradient.l2_norm();
            let (diamond, _) = local_optimal_field(spec, &u_new, &v_new, &cfg.diag_argmax)?;
            let dist_to_local = u_new.l2_distance(&diamond);
            let new_state = FlowState {
                tau: state.tau + step,
                u: u_new,
                v: v_new,
                rho: rho_new,
                j: j_new,
                grad_norm,
                dist_to_local,
                gradient,
            };
            let diag = StepDiagnostics {
                accepted_dtau: step,
                halvings,
                max_v_increase: max_v_increase.max(0.0),
            };
            return Ok((new_state, diag));
        }
        step *= cfg.armijo_shrink;
    }
    Err(Error::StepFailure {
        halvings: cfg.max_halvings,
        j: state.j,
        grad_norm: state.grad_norm,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Termination {
    /// Gradient norm fell below the threshold.
    GradNorm,
    /// Cost stopped decreasing over the stall window.
    Stalled,
    /// Step budget exhausted.
    MaxSteps,
    /// A step failed; the trace holds everything accepted before the failure.
    StepFailed(String),
}

/// One row of the flow trace.
#[derive(Clone, Debug)]
pub struct FlowRecord {
    pub step: usize,
    pub tau: f64,
    pub j: f64,
    pub grad_norm: f64,
    pub dist_to_local: f64,
    pub accepted_dtau: f64,
    pub hjb_residual: Option<f64>,
    pub wall_ms: f64,
    pub max_v_increase: f64,
}

impl FlowRecord {
    pub const CSV_HEADER: &'static str =
        "tau,J,grad_norm,dist_to_local,accepted_dtau,hjb_residual,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{},{}",
            self.tau,
            self.j,
            self.grad_norm,
            self.dist_to_local,
            self.accepted_dtau,
            self.hjb_residual.map(|r| format!("{r:e}")).unwrap_or_default(),
            self.wall_ms
        )
    }
}

#[derive(Clone, Debug)]
pub struct FlowTrace {
    pub records: Vec<FlowRecord>,
    pub termination: Termination,
    pub final_state: FlowState,
}

impl FlowTrace {
    pub fn final_record(&self) -> &FlowRecord {
        self.records.last().expect("trace always holds the initial record")
    }
}

/// Run the flow from `u0` until the gradient-norm stop, a stall, the step
/// budget, or a step failure. The returned trace always contains the record
/// of the initial state, so fits over `J(tau)` see the starting cost.
pub fn run_flow(spec: &ProblemSpec, u0: ControlField, cfg: &FlowConfig) -> Result<FlowTrace> {
    cfg.validate()?;
    let t0 = std::time::Instant::now();
    let mut state = FlowState::evaluate(spec, u0, 0.0, cfg)?;
    let mut records = vec![FlowRecord {
        step: 0,
        tau: 0.0,
        j: state.j,
        grad_norm: state.grad_norm,
        dist_to_local: state.dist_to_local,
        accepted_dtau: 0.0,
        hjb_residual: None,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        max_v_increase: 0.0,
    }];

    let mut termination = Termination::MaxSteps;
    for step in 1..=cfg.max_steps {
        if state.grad_norm < cfg.stop_grad_norm {
            termination = Termination::GradNorm;
            break;
        }
        let step_start = std::time::Instant::now();
        match flow_step(spec, &state, cfg) {
            Ok((new_state, diag)) => {
                state = new_state;
                let hjb = match cfg.hjb_every {
                    Some(k) if k > 0 && step % k == 0 => Some(crate::local_opt::hjb_residual(
                        spec,
                        &state.v,
                        &ArgmaxConfig::multistart(spec.geometry.dim_control),
                    )?),
                    _ => None,
                };
                records.push(FlowRecord {
                    step,
                    tau: state.tau,
                    j: state.j,
                    grad_norm: state.grad_norm,
                    dist_to_local: state.dist_to_local,
                    accepted_dtau: diag.accepted_dtau,
                    hjb_residual: hjb,
                    wall_ms: step_start.elapsed().as_secs_f64() * 1e3,
                    max_v_increase: diag.max_v_increase,
                });
            }
            Err(e) => {
                termination = Termination::StepFailed(e.to_string());
                return Ok(FlowTrace { records, termination, final_state: state });
            }
        }
        // stall: too little decrease over the trailing window
        if records.len() > cfg.stall_window {
            let then = &records[records.len() - 1 - cfg.stall_window];
            let now = records.last().unwrap();
            if then.j - now.j < cfg.stall_min_decrease {
                termination = Termination::Stalled;
                break;
            }
        }
    }
    if termination == Termination::MaxSteps && state.grad_norm < cfg.stop_grad_norm {
        termination = Termination::GradNorm;
    }
    Ok(FlowTrace { records, termination, final_state: state })
}

/// Reference data for the optimality-gap diagnostics: the known optimal
/// control and its cost.
#[derive(Clone, Debug)]
pub struct PlReference {
    pub u_star: ControlField,
    pub j_star: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct PlDiagnostics {
    pub grad_norm_sq: f64,
    /// `J - J*`; absent when no reference is known.
    pub j_gap: Option<f64>,
    /// `|u - u_diamond| / |u - u*|`; absent without a reference or once
    /// `|u - u*|` degenerates below 1e-10.
    pub ratio: Option<f64>,
}

pub fn pl_diagnostics(state: &FlowState, reference: Option<&PlReference>) -> PlDiagnostics {
    let grad_norm_sq = state.grad_norm * state.grad_norm;
    match reference {
        None => PlDiagnostics { grad_norm_sq, j_gap: None, ratio: None },
        Some(r) => {
            let dist_star = state.u.l2_distance(&r.u_star);
            let ratio =
                if dist_star < 1e-10 { None } else { Some(state.dist_to_local / dist_star) };
            PlDiagnostics { grad_norm_sq, j_gap: Some(state.j - r.j_star), ratio }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldRole;
    use crate::geometry::TorusGeometry;
    use crate::grid::SpaceTimeGrid;
    use crate::problems::build_problem;

    fn small_grid(horizon: f64, n_t: usize, n_x: usize) -> SpaceTimeGrid {
        let geom = TorusGeometry::new(1, 1, 1).unwrap();
        SpaceTimeGrid::new(geom, horizon, n_t, n_x).unwrap()
    }

    #[test]
    fn cost_of_unit_running_cost_is_horizon() {
        let built = build_problem("quartic_trap").unwrap();
        let g = small_grid(built.default_horizon, 9, 16);
        // r == 1, h == 0 gives V(0) == T
        let v = ScalarField::from_fn(g, FieldRole::Value, |t, _| g.horizon - t).unwrap();
        let rho0 = vec![1.0; g.n_cells()];
        assert!((cost_j(&v, &rho0) - g.horizon).abs() < 1e-14);
        // h == c, r == 0 gives J == c
        let v = ScalarField::from_fn(g, FieldRole::Value, |_, _| -1.7).unwrap();
        assert!((cost_j(&v, &rho0) + 1.7).abs() < 1e-14);
    }

    #[test]
    fn gradient_scales_linearly_in_density() {
        let built = build_problem("quartic_trap").unwrap();
        let g = small_grid(built.default_horizon, 5, 12);
        let u = ControlField::constant(g, &[0.6]).unwrap();
        let (v, _) = solve_hj(&built.spec, &u, &SolverConfig::default()).unwrap();
        let rho = ScalarField::from_fn(g, FieldRole::Generic, |_, _| 1.0).unwrap();
        let rho3 = ScalarField::from_fn(g, FieldRole::Generic, |_, _| 3.0).unwrap();
        let g1 = functional_gradient(&built.spec, &u, &v, &rho).unwrap();
        let g3 = functional_gradient(&built.spec, &u, &v, &rho3).unwrap();
        for (a, b) in g1.values().iter().zip(g3.values()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_dtau_step_is_identity() {
        let built = build_problem("quartic_trap").unwrap();
        let g = small_grid(built.default_horizon, 5, 12);
        let mut cfg = FlowConfig::defaults(1);
        cfg.dtau = 0.0;
        let u = ControlField::constant(g, &[1.0]).unwrap();
        let state = FlowState::evaluate(&built.spec, u, 0.0, &cfg).unwrap();
        let (next, diag) = flow_step(&built.spec, &state, &cfg).unwrap();
        assert_eq!(next.tau, state.tau);
        assert_eq!(next.j, state.j);
        assert_eq!(next.u.values(), state.u.values());
        assert_eq!(diag.accepted_dtau, 0.0);
    }

    #[test]
    fn accepted_steps_never_increase_cost() {
        let built = build_problem("manufactured_concave").unwrap();
        let g = small_grid(built.default_horizon, 9, 16);
        let mut cfg = FlowConfig::defaults(1);
        cfg.dtau = 0.2;
        cfg.max_steps = 15;
        let u0 = ControlField::constant(g, &[1.0]).unwrap();
        let trace = run_flow(&built.spec, u0, &cfg).unwrap();
        assert_eq!(trace.records.len(), 16);
        for pair in trace.records.windows(2) {
            assert!(pair[1].j <= pair[0].j + 1e-12, "J increased: {} -> {}", pair[0].j, pair[1].j);
            assert!(pair[1].j < pair[0].j, "accepted step did not strictly decrease J");
        }
        assert!(matches!(
            trace.termination,
            Termination::MaxSteps | Termination::GradNorm | Termination::Stalled
        ));
    }

    #[test]
    fn manufactured_flow_reaches_tight_stationarity() {
        let built = build_problem("manufactured_concave").unwrap();
        // the gradient's consistency floor on this grid (~5e-8) sits well
        // under the stop threshold
        let g = small_grid(built.default_horizon, 65, 48);
        let mut cfg = FlowConfig::defaults(1);
        cfg.dtau = 0.5;
        cfg.max_steps = 120;
        cfg.stop_grad_norm = 1e-6;
        let u0 = ControlField::zeros(g);
        let trace = run_flow(&built.spec, u0, &cfg).unwrap();
        assert_eq!(trace.termination, Termination::GradNorm);
        let state = &trace.final_state;
        assert!(state.grad_norm < 1e-6);

        // close to the closed-form optimum up to discretization
        let oracle = built.oracle.as_ref().unwrap();
        let u_star = oracle.u_star_field(g).unwrap();
        assert!(state.u.l2_distance(&u_star) < 1e-2);

        // the strong-concavity chain at the fixed point: with mu_g > 0 and
        // the observed density floor, |u - u_diamond| <= grad_norm/(mu rho) + tol
        let rho_min = state.rho.min_value();
        assert!(rho_min > 0.0);
        let bound = state.grad_norm / (built.spec.mu_g * rho_min) + 1e-6;
        assert!(
            state.dist_to_local <= bound,
            "dist {} vs chain bound {bound}",
            state.dist_to_local
        );
    }

    #[test]
    fn flow_from_manufactured_optimum_terminates_immediately() {
        let built = build_problem("manufactured_concave").unwrap();
        let oracle = built.oracle.as_ref().unwrap();
        let g = small_grid(built.default_horizon, 41, 32);
        let u_star = oracle.u_star_field(g).unwrap();
        let mut cfg = FlowConfig::defaults(1);
        // at the sampled optimum the gradient norm is pure discretization
        // error; the calibrated threshold sits above it
        cfg.stop_grad_norm = 2e-2;
        cfg.max_steps = 3;
        let trace = run_flow(&built.spec, u_star, &cfg).unwrap();
        assert_eq!(trace.termination, Termination::GradNorm);
        assert_eq!(trace.records.len(), 1);
    }

    #[test]
    fn value_sensitivity_vanishes_before_start_and_marginalizes_to_gradient() {
        let built = build_problem("quartic_trap").unwrap();
        let g = small_grid(built.default_horizon, 5, 8);
        let spec = &built.spec;
        let u = ControlField::constant(g, &[0.8]).unwrap();
        let solver = SolverConfig::default();
        let (v, _) = solve_hj(spec, &u, &solver).unwrap();
        let s_level = 2;
        let sens = value_sensitivity(spec, &u, &v, s_level, 3, &solver).unwrap();
        let n_cells = g.n_cells();
        for level in 0..s_level {
            for s in 0..n_cells {
                assert_eq!(sens.node(level, s)[0], 0.0);
            }
        }
        // marginalizing the s=0 sensitivities against uniform weights
        // recovers the functional gradient (transport is linear in the
        // initial condition)
        let rho0 = vec![1.0; n_cells];
        let (rho, _) = solve_fp(spec, &u, &rho0, &solver).unwrap();
        let grad = functional_gradient(spec, &u, &v, &rho).unwrap();
        let mut acc = ControlField::zeros(g);
        for y in 0..n_cells {
            let sens_y = value_sensitivity(spec, &u, &v, 0, y, &solver).unwrap();
            acc.axpy(g.cell_volume(), &sens_y);
        }
        let tol = 2.0 * g.cell_volume();
        for (a, b) in acc.values().iter().zip(grad.values()) {
            assert!((a - b).abs() < tol, "marginalized {a} vs gradient {b}");
        }
    }

    #[test]
    fn planar_flow_descends_toward_the_quadratic_optimum() {
        // two-dimensional state and control: b = u, r = |u - c|^2, sigma = I,
        // so the maximizer is u = c + p/2 and the flow has a clean target
        use crate::problem::{scalar_fn, tensor_fn};
        use std::sync::Arc;
        let geom = TorusGeometry::new(2, 2, 2).unwrap();
        let c = [0.3, -0.5];
        let spec = crate::ProblemSpec {
            geometry: geom,
            name: "planar".into(),
            drift: tensor_fn(|_, u, out| out.copy_from_slice(u)),
            diffusion: tensor_fn(|_, _, out| out.copy_from_slice(&[1.0, 0.0, 0.0, 1.0])),
            running_cost: scalar_fn(move |_, u| {
                (u[0] - c[0]).powi(2) + (u[1] - c[1]).powi(2)
            }),
            terminal_cost: Arc::new(|x| {
                0.05 * (2.0 * std::f64::consts::PI * x[0]).cos()
                    + 0.05 * (2.0 * std::f64::consts::PI * x[1]).sin()
            }),
            grad_u_drift: tensor_fn(|_, _, out| out.copy_from_slice(&[1.0, 0.0, 0.0, 1.0])),
            grad_u_diffusion: tensor_fn(|_, _, out| out.fill(0.0)),
            grad_u_running_cost: tensor_fn(move |_, u, out| {
                out[0] = 2.0 * (u[0] - c[0]);
                out[1] = 2.0 * (u[1] - c[1]);
            }),
            sigma0: 0.5,
            mu_g: 2.0,
            bound_k: 2.0,
            u_box: 5.0,
        };
        let g = SpaceTimeGrid::new(geom, 0.2, 5, 8).unwrap();
        let mut cfg = FlowConfig::defaults(2);
        cfg.dtau = 0.2;
        cfg.max_steps = 40;
        cfg.stop_grad_norm = 1e-3;
        let trace = run_flow(&spec, ControlField::zeros(g), &cfg).unwrap();
        assert_eq!(trace.termination, Termination::GradNorm);
        for w in trace.records.windows(2) {
            assert!(w[1].j <= w[0].j + 1e-12);
        }
        // the stationary control is c + p/2 with |p| <= ~0.3 here, so the
        // converged field stays in that neighbourhood of the cost minimum
        let f = &trace.final_state;
        for level in 0..g.n_t {
            for s in 0..g.n_cells() {
                let u = f.u.node(level, s);
                assert!((u[0] - c[0]).abs() < 0.25 && (u[1] - c[1]).abs() < 0.25);
            }
        }
        assert!(f.dist_to_local < 1e-3);
    }

    #[test]
    fn stall_detection_and_residual_sampling() {
        let built = build_problem("manufactured_concave").unwrap();
        let g = small_grid(built.default_horizon, 9, 16);
        let mut cfg = FlowConfig::defaults(1);
        cfg.dtau = 0.3;
        cfg.max_steps = 30;
        cfg.stop_grad_norm = 1e-14;
        // anything short of a full J collapse counts as a stall
        cfg.stall_window = 3;
        cfg.stall_min_decrease = 1e9;
        cfg.hjb_every = Some(2);
        let trace = run_flow(&built.spec, ControlField::zeros(g), &cfg).unwrap();
        assert_eq!(trace.termination, Termination::Stalled);
        assert_eq!(trace.records.len(), 1 + cfg.stall_window);
        let sampled: Vec<&FlowRecord> =
            trace.records.iter().filter(|r| r.hjb_residual.is_some()).collect();
        assert!(!sampled.is_empty());
        for r in &trace.records {
            assert_eq!(r.hjb_residual.is_some(), r.step > 0 && r.step % 2 == 0);
        }
    }

    #[test]
    fn value_sensitivity_at_optimum_shrinks_under_refinement() {
        // at the sampled closed-form optimum the sensitivity field is pure
        // discretization error (the maximum condition kills the integrand)
        let built = build_problem("manufactured_concave").unwrap();
        let oracle = built.oracle.as_ref().unwrap();
        let solver = SolverConfig::default();
        let sup_at = |n_t: usize, n_x: usize| {
            let g = small_grid(built.default_horizon, n_t, n_x);
            let u_star = oracle.u_star_field(g).unwrap();
            let (v, _) = solve_hj(&built.spec, &u_star, &solver).unwrap();
            let sens = value_sensitivity(&built.spec, &u_star, &v, 0, 0, &solver).unwrap();
            sens.sup_norm()
        };
        let coarse = sup_at(9, 16);
        let fine = sup_at(33, 32);
        assert!(
            coarse / fine > 2.5,
            "sensitivity sup-norm ratio {} (coarse {coarse}, fine {fine})",
            coarse / fine
        );
    }

    #[test]
    fn pl_diagnostics_mid_flow_are_finite_and_positive() {
        let built = build_problem("manufactured_concave").unwrap();
        let oracle = built.oracle.as_ref().unwrap();
        let g = small_grid(built.default_horizon, 9, 16);
        let cfg = FlowConfig::defaults(1);
        // u = 0 is far from the optimum: both gap quantities strictly positive
        let state = FlowState::evaluate(&built.spec, ControlField::zeros(g), 0.0, &cfg).unwrap();
        let reference = PlReference {
            u_star: oracle.u_star_field(g).unwrap(),
            j_star: oracle.j_star(),
        };
        let d = pl_diagnostics(&state, Some(&reference));
        assert!(d.grad_norm_sq > 0.0);
        assert!(d.j_gap.unwrap() > 0.0);
        let ratio = d.ratio.unwrap();
        assert!(ratio.is_finite() && ratio > 0.0);
    }

    #[test]
    fn pl_diagnostics_guard_degenerate_reference() {
        let built = build_problem("manufactured_concave").unwrap();
        let oracle = built.oracle.as_ref().unwrap();
        let g = small_grid(built.default_horizon, 5, 8);
        let u_star = oracle.u_star_field(g).unwrap();
        let cfg = FlowConfig::defaults(1);
        let state = FlowState::evaluate(&built.spec, u_star.clone(), 0.0, &cfg).unwrap();
        let reference = PlReference { u_star, j_star: oracle.j_star() };
        let d = pl_diagnostics(&state, Some(&reference));
        assert!(d.ratio.is_none(), "ratio must be n/a at u = u*");
        assert!(d.j_gap.is_some());
        let d_none = pl_diagnostics(&state, None);
        assert!(d_none.j_gap.is_none() && d_none.ratio.is_none());
    }
}
