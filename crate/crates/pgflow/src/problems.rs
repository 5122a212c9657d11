//! Built-in control problems with known structure, used as test instruments
//! throughout the crate.
//!
//! * `quartic_trap`: scalar double-well running cost whose pointwise
//!   maximization has two branches; the gradient flow can stall on the
//!   suboptimal one. The terminal cost mixes two Fourier modes so the two
//!   basins carry genuinely different costs (a single cosine would make them
//!   mirror images with identical cost).
//! * `manufactured_concave`: a strongly concave problem built backwards from
//!   a closed-form value function, so the optimal control and optimal cost
//!   are known exactly and convergence rates can be measured.
//! * `controlled_diffusion_demo`: the diffusion coefficient depends on the
//!   control, which makes the optimality equation fully nonlinear; no closed
//!   form exists, only invariant checks apply.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::{ControlField, FieldRole, ScalarField};
use crate::geometry::TorusGeometry;
use crate::grid::SpaceTimeGrid;
use crate::problem::{scalar_fn, tensor_fn, CoState, ProblemSpec};
use crate::rng::{purpose, CounterRng};

/// Closed forms accompanying a manufactured problem.
#[derive(Clone)]
pub struct ManufacturedOracle {
    pub amplitude: f64,
    pub horizon: f64,
}

impl ManufacturedOracle {
    pub fn v_star(&self, t: f64, x: &[f64]) -> f64 {
        self.amplitude * (-t).exp() * (2.0 * PI * x[0]).cos()
    }

    pub fn v_star_t(&self, t: f64, x: &[f64]) -> f64 {
        -self.v_star(t, x)
    }

    pub fn v_star_x(&self, t: f64, x: &[f64]) -> f64 {
        -2.0 * PI * self.amplitude * (-t).exp() * (2.0 * PI * x[0]).sin()
    }

    pub fn v_star_xx(&self, t: f64, x: &[f64]) -> f64 {
        -4.0 * PI * PI * self.v_star(t, x)
    }

    /// The optimal control `u*(t,x) = -dV*/dx`.
    pub fn u_star(&self, t: f64, x: &[f64]) -> f64 {
        -self.v_star_x(t, x)
    }

    pub fn u_star_field(&self, grid: SpaceTimeGrid) -> Result<ControlField> {
        let me = self.clone();
        ControlField::from_fn(grid, move |t, x, out| out[0] = me.u_star(t, x))
    }

    pub fn v_star_field(&self, grid: SpaceTimeGrid) -> Result<ScalarField> {
        let me = self.clone();
        ScalarField::from_fn(grid, FieldRole::Value, move |t, x| me.v_star(t, x))
    }

    /// Optimal cost with the uniform initial density: the cosine integrates
    /// to zero over the torus.
    pub fn j_star(&self) -> f64 {
        0.0
    }
}

/// A built-in problem plus its recommended horizon and any closed forms.
pub struct BuiltinProblem {
    pub spec: ProblemSpec,
    pub default_horizon: f64,
    pub oracle: Option<ManufacturedOracle>,
}

pub const BUILTIN_NAMES: [&str; 3] =
    ["quartic_trap", "manufactured_concave", "controlled_diffusion_demo"];

/// Build a named problem at its default horizon.
pub fn build_problem(name: &str) -> Result<BuiltinProblem> {
    match name {
        "quartic_trap" => Ok(quartic_trap()),
        "manufactured_concave" => Ok(manufactured_concave(0.3)),
        "controlled_diffusion_demo" => Ok(controlled_diffusion_demo()),
        other => Err(Error::NotFound(other.into())),
    }
}

/// Build a named problem for a specific horizon. The manufactured problem's
/// terminal cost depends on the horizon, so it must be rebuilt rather than
/// re-truncated.
pub fn build_problem_with_horizon(name: &str, horizon: f64) -> Result<BuiltinProblem> {
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    match name {
        "manufactured_concave" => Ok(manufactured_concave(horizon)),
        other => {
            let mut p = build_problem(other)?;
            p.default_horizon = horizon;
            Ok(p)
        }
    }
}

/// Scalar double-well problem: `b = u^3/3`, `sigma = sqrt(2)`,
/// `r = u^4/4 - u^2/2`. The pointwise objective `G` has two local maxima in
/// `u` whenever the value gradient is moderate, so it is not concave.
fn quartic_trap() -> BuiltinProblem {
    let geom = TorusGeometry::new(1, 1, 1).unwrap();
    let spec = ProblemSpec {
        geometry: geom,
        name: "quartic_trap".into(),
        drift: tensor_fn(|_, u, out| out[0] = u[0] * u[0] * u[0] / 3.0),
        diffusion: tensor_fn(|_, _, out| out[0] = 2.0f64.sqrt()),
        running_cost: scalar_fn(|_, u| 0.25 * u[0].powi(4) - 0.5 * u[0] * u[0]),
        terminal_cost: Arc::new(|x| {
            0.15 * (2.0 * PI * x[0]).sin() + 0.075 * (4.0 * PI * x[0]).sin()
        }),
        grad_u_drift: tensor_fn(|_, u, out| out[0] = u[0] * u[0]),
        grad_u_diffusion: tensor_fn(|_, _, out| out[0] = 0.0),
        grad_u_running_cost: tensor_fn(|_, u, out| out[0] = u[0].powi(3) - u[0]),
        sigma0: 1.0,
        mu_g: 0.0,
        bound_k: 5.0,
        u_box: 5.0,
    };
    BuiltinProblem { spec, default_horizon: 0.2, oracle: None }
}

/// Strongly concave problem manufactured from
/// `V*(t,x) = a e^{-t} cos(2 pi x)` with `b = u`, `sigma = sqrt(2)`, and
/// `r = u^2/2 + r0(t,x)`, where `r0` is the unique remainder that makes `V*`
/// solve the optimality equation exactly. The optimal control is
/// `u* = -dV*/dx` and `G` is 1-strongly concave in `u`.
fn manufactured_concave(horizon: f64) -> BuiltinProblem {
    let geom = TorusGeometry::new(1, 1, 1).unwrap();
    let a = 0.2;
    let r0 = move |t: f64, x: &[f64]| -> f64 {
        let c = (2.0 * PI * x[0]).cos();
        let s = (2.0 * PI * x[0]).sin();
        a * (1.0 + 4.0 * PI * PI) * (-t).exp() * c
            + 2.0 * PI * PI * a * a * (-2.0 * t).exp() * s * s
    };
    let spec = ProblemSpec {
        geometry: geom,
        name: "manufactured_concave".into(),
        drift: tensor_fn(|_, u, out| out[0] = u[0]),
        diffusion: tensor_fn(|_, _, out| out[0] = 2.0f64.sqrt()),
        running_cost: Arc::new(move |t, x, u| 0.5 * u[0] * u[0] + r0(t, x)),
        terminal_cost: Arc::new(move |x| a * (-horizon).exp() * (2.0 * PI * x[0]).cos()),
        grad_u_drift: tensor_fn(|_, _, out| out[0] = 1.0),
        grad_u_diffusion: tensor_fn(|_, _, out| out[0] = 0.0),
        grad_u_running_cost: tensor_fn(|_, u, out| out[0] = u[0]),
        sigma0: 1.0,
        mu_g: 1.0,
        bound_k: 5.0,
        u_box: 5.0,
    };
    BuiltinProblem {
        spec,
        default_horizon: horizon,
        oracle: Some(ManufacturedOracle { amplitude: a, horizon }),
    }
}

/// Control-dependent diffusion: `sigma(u) = sqrt(2 (0.5 + 0.25 tanh^2 u))`,
/// `b = u`, `r = u^2 + 0.1 (1 - cos(2 pi x))`, `h = 0`.
fn controlled_diffusion_demo() -> BuiltinProblem {
    let geom = TorusGeometry::new(1, 1, 1).unwrap();
    let sigma = |u: f64| (1.0 + 0.5 * u.tanh() * u.tanh()).sqrt();
    let spec = ProblemSpec {
        geometry: geom,
        name: "controlled_diffusion_demo".into(),
        drift: tensor_fn(|_, u, out| out[0] = u[0]),
        diffusion: tensor_fn(move |_, u, out| out[0] = sigma(u[0])),
        running_cost: scalar_fn(|x, u| u[0] * u[0] + 0.1 * (1.0 - (2.0 * PI * x[0]).cos())),
        terminal_cost: Arc::new(|_| 0.0),
        grad_u_drift: tensor_fn(|_, _, out| out[0] = 1.0),
        grad_u_diffusion: tensor_fn(move |_, u, out| {
            let th = u[0].tanh();
            let sech2 = 1.0 - th * th;
            out[0] = th * sech2 / (2.0 * sigma(u[0]));
        }),
        grad_u_running_cost: tensor_fn(|_, u, out| out[0] = 2.0 * u[0]),
        sigma0: 0.5,
        mu_g: 0.0,
        bound_k: 5.0,
        u_box: 5.0,
    };
    BuiltinProblem { spec, default_horizon: 0.25, oracle: None }
}

/// Build-time validation of the manufactured construction: plugging the
/// closed-form `(V*, u*)` into the optimality identity must leave residual
/// below 1e-12 at seeded random off-grid points, all evaluated analytically.
pub fn validate_manufactured(problem: &BuiltinProblem, n_probes: usize, seed: u64) -> Result<f64> {
    let oracle = problem
        .oracle
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("problem carries no oracle".into()))?;
    let rng = CounterRng::new(seed);
    let mut worst = 0.0f64;
    for i in 0..n_probes as u64 {
        let t = rng.uniform(purpose::PROBE, i, 0, 0) * problem.default_horizon;
        let x = [rng.uniform(purpose::PROBE, i, 1, 0)];
        let u_star = [oracle.u_star(t, &x)];
        let cs = CoState {
            p: vec![-oracle.v_star_x(t, &x)],
            big_p: vec![-oracle.v_star_xx(t, &x)],
        };
        // stationarity of the closed-form control
        let grad = problem.spec.grad_u_g(t, &x, &u_star, &cs)?;
        if grad[0].abs() > 1e-12 {
            return Err(Error::Numeric(format!("u* not stationary: grad = {}", grad[0])));
        }
        let residual =
            -oracle.v_star_t(t, &x) + problem.spec.eval_g(t, &x, &u_star, &cs)?;
        worst = worst.max(residual.abs());
        if residual.abs() > 1e-12 {
            return Err(Error::Numeric(format!(
                "manufactured residual {residual:.3e} at t={t}, x={:?}",
                x
            )));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_name_is_not_found() {
        assert!(matches!(build_problem("no_such_problem"), Err(Error::NotFound(_))));
    }

    #[test]
    fn quartic_coefficients_at_unit_control() {
        let p = build_problem("quartic_trap").unwrap().spec;
        let mut b = [0.0];
        (p.drift)(0.0, &[0.4], &[1.0], &mut b);
        assert!((b[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!(((p.running_cost)(0.0, &[0.4], &[1.0]) + 0.25).abs() < 1e-15);
        let d = p.eval_d(0.0, &[0.4], &[1.0]).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn manufactured_identity_holds_at_off_grid_points() {
        let p = build_problem("manufactured_concave").unwrap();
        let worst = validate_manufactured(&p, 1000, 99).unwrap();
        assert!(worst < 1e-12, "worst residual {worst}");
    }

    #[test]
    fn manufactured_rebuild_matches_new_horizon() {
        let p = build_problem_with_horizon("manufactured_concave", 0.5).unwrap();
        assert_eq!(p.default_horizon, 0.5);
        let worst = validate_manufactured(&p, 200, 5).unwrap();
        assert!(worst < 1e-12);
        // terminal cost equals V* at the new horizon
        let o = p.oracle.as_ref().unwrap();
        let x = [0.31];
        assert!(((p.spec.terminal_cost)(&x) - o.v_star(0.5, &x)).abs() < 1e-15);
    }

    #[test]
    fn demo_diffusion_monotone_in_control_magnitude() {
        let p = build_problem("controlled_diffusion_demo").unwrap().spec;
        let d0 = p.eval_d(0.0, &[0.2], &[0.0]).unwrap()[0];
        assert!((d0 - 0.5).abs() < 1e-15);
        let mut last = d0;
        for u in [0.5, 1.0, 2.0, 4.0] {
            let d = p.eval_d(0.0, &[0.2], &[u]).unwrap()[0];
            assert!(d > last);
            let dneg = p.eval_d(0.0, &[0.2], &[-u]).unwrap()[0];
            assert!((d - dneg).abs() < 1e-15);
            last = d;
        }
    }
}
