//! Pointwise maximization of the generalized Hamiltonian: the local optimal
//! control, the residual of the optimality equation, and the closed forms of
//! the scalar quartic instrument.
//!
//! The maximizer runs damped Newton on `grad_u G = 0` (falling back to
//! gradient ascent where the Hessian is not negative definite) from the
//! incumbent control plus fixed multistart offsets. The incumbent-only mode
//! is exposed deliberately: the gradient flow is local, and restricting the
//! search to the incumbent's basin reproduces exactly the stall behaviour the
//! quartic instrument is built to show.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{slice_gradient, slice_hessian, ControlField, ScalarField};
use crate::linalg;
use crate::problem::{CoState, ProblemSpec, Scratch};

#[derive(Clone, Debug)]
pub struct ArgmaxConfig {
    /// Convergence threshold on `|grad_u G|`.
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    /// Offsets added to the incumbent to seed the search; always includes the
    /// incumbent itself when it contains the zero vector.
    pub multistart_offsets: Vec<Vec<f64>>,
    /// Candidates whose G-values agree within this are ties.
    pub tie_tol: f64,
}

impl ArgmaxConfig {
    /// Default multistart: the incumbent plus unit offsets along every
    /// control axis. The quartic instrument has exactly two local maxima and
    /// the fixed +-1 offsets capture both.
    pub fn multistart(dim_control: usize) -> Self {
        let mut offsets = vec![vec![0.0; dim_control]];
        for c in 0..dim_control {
            for sign in [1.0, -1.0] {
                let mut off = vec![0.0; dim_control];
                off[c] = sign;
                offsets.push(off);
            }
        }
        Self { newton_tol: 1e-10, max_newton_iters: 50, multistart_offsets: offsets, tie_tol: 1e-9 }
    }

    /// Search only from the incumbent: stays inside the incumbent's basin.
    pub fn incumbent_only(dim_control: usize) -> Self {
        Self {
            newton_tol: 1e-10,
            max_newton_iters: 50,
            multistart_offsets: vec![vec![0.0; dim_control]],
            tie_tol: 1e-9,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.newton_tol <= 0.0 || self.tie_tol <= 0.0 {
            return Err(Error::InvalidArgument("argmax tolerances must be positive".into()));
        }
        if self.multistart_offsets.is_empty() {
            return Err(Error::InvalidArgument("argmax needs at least one start point".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ArgmaxOutcome {
    pub u: Vec<f64>,
    pub g_value: f64,
    pub grad_norm: f64,
    /// Set when distinct converged candidates tied in G and the
    /// lexicographic convention picked the winner.
    pub tie_broken: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn lex_greater(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return true;
        }
        if x < y {
            return false;
        }
    }
    false
}

/// One damped Newton / ascent run from a single start point.
struct Climb {
    /// `(u, G(u))` when the gradient dropped below tolerance.
    converged: Option<(Vec<f64>, f64)>,
    best_residual: f64,
}

fn climb_from(
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
    cs: &CoState,
    start: &[f64],
    cfg: &ArgmaxConfig,
    ws: &mut Scratch,
) -> Result<Climb> {
    let nc = spec.geometry.dim_control;
    let mut u = start.to_vec();
    let mut grad = vec![0.0; nc];
    let mut hess = vec![0.0; nc * nc];
    let mut best_residual = f64::INFINITY;
    for _ in 0..cfg.max_newton_iters {
        spec.grad_u_g_scratch(t, x, &u, cs, ws, &mut grad)?;
        let gn = norm(&grad);
        best_residual = best_residual.min(gn);
        if gn <= cfg.newton_tol {
            let g = spec.eval_g_scratch(t, x, &u, cs, ws)?;
            return Ok(Climb { converged: Some((u, g)), best_residual: gn });
        }
        spec.hess_u_g_scratch(t, x, &u, cs, ws, &mut hess)?;
        let eig = linalg::sym_eigenvalues(&hess, nc);
        let dir = if eig[nc - 1] < 0.0 {
            // Newton step toward the stationary point of the local model
            match linalg::solve_dense(&hess, &grad.iter().map(|g| -g).collect::<Vec<_>>(), nc) {
                Some(d) => d,
                None => grad.clone(),
            }
        } else {
            grad.clone()
        };
        // backtrack until G increases or the gradient shrinks
        let g0 = spec.eval_g_scratch(t, x, &u, cs, ws)?;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = u.iter().zip(&dir).map(|(ui, di)| ui + alpha * di).collect();
            let g1 = spec.eval_g_scratch(t, x, &cand, cs, ws)?;
            let gn1 = {
                spec.grad_u_g_scratch(t, x, &cand, cs, ws, &mut grad)?;
                norm(&grad)
            };
            if g1 > g0 || gn1 < gn {
                u = cand;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    // final residual check
    spec.grad_u_g_scratch(t, x, &u, cs, ws, &mut grad)?;
    let gn = norm(&grad);
    best_residual = best_residual.min(gn);
    if gn <= cfg.newton_tol {
        let g = spec.eval_g_scratch(t, x, &u, cs, ws)?;
        Ok(Climb { converged: Some((u, g)), best_residual: gn })
    } else {
        Ok(Climb { converged: None, best_residual })
    }
}

/// Maximize `u -> G(t, x, u, p, P)` from the incumbent and the configured
/// multistart offsets. Ties in G within `tie_tol` break toward the
/// lexicographically largest control vector so runs are deterministic.
pub fn argmax_g(
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
    cs: &CoState,
    incumbent: &[f64],
    cfg: &ArgmaxConfig,
) -> Result<ArgmaxOutcome> {
    cfg.validate()?;
    let nc = spec.geometry.dim_control;
    if incumbent.len() != nc {
        return Err(Error::DimensionMismatch("incumbent control has wrong arity".into()));
    }
    let mut ws = spec.scratch();
    let mut candidates: Vec<(Vec<f64>, f64, f64)> = Vec::new();
    let mut best_residual = f64::INFINITY;
    for off in &cfg.multistart_offsets {
        if off.len() != nc {
            return Err(Error::DimensionMismatch("multistart offset has wrong arity".into()));
        }
        let start: Vec<f64> = incumbent.iter().zip(off).map(|(u, o)| u + o).collect();
        let climb = climb_from(spec, t, x, cs, &start, cfg, &mut ws)?;
        best_residual = best_residual.min(climb.best_residual);
        if let Some((u, g)) = climb.converged {
            let mut grad = vec![0.0; nc];
            spec.grad_u_g_scratch(t, x, &u, cs, &mut ws, &mut grad)?;
            candidates.push((u, g, norm(&grad)));
        }
    }
    if candidates.is_empty() {
        return Err(Error::ArgmaxFailure { best_residual, location: format!("t={t}, x={x:?}") });
    }
    let g_best = candidates.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let mut tied: Vec<&(Vec<f64>, f64, f64)> =
        candidates.iter().filter(|c| c.1 >= g_best - cfg.tie_tol).collect();
    tied.sort_by(|a, b| if lex_greater(&a.0, &b.0) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    let winner = tied[0];
    let distinct_ties = tied
        .iter()
        .any(|c| c.0.iter().zip(&winner.0).any(|(a, b)| (a - b).abs() > 1e-8));
    for (c, &ui) in winner.0.iter().enumerate() {
        if ui.abs() > spec.u_box {
            return Err(Error::BoxViolation {
                value: ui.abs(),
                bound: spec.u_box,
                location: format!("t={t}, x={x:?}, component {c}"),
            });
        }
    }
    Ok(ArgmaxOutcome {
        u: winner.0.clone(),
        g_value: winner.1,
        grad_norm: winner.2,
        tie_broken: distinct_ties,
    })
}

/// Summary of a whole-field pointwise maximization.
#[derive(Clone, Debug, Default)]
pub struct LocalOptReport {
    /// Nodes where the lexicographic tie convention decided the winner.
    pub ties_broken: usize,
    pub max_grad_norm: f64,
}

/// Apply `argmax_g` at every grid node, with the costate assembled from the
/// central-difference calculus of `v` and the stored control as incumbent.
pub fn local_optimal_field(
    spec: &ProblemSpec,
    u: &ControlField,
    v: &ScalarField,
    cfg: &ArgmaxConfig,
) -> Result<(ControlField, LocalOptReport)> {
    cfg.validate()?;
    let grid = u.grid;
    if v.grid != grid {
        return Err(Error::DimensionMismatch("control and value grids differ".into()));
    }
    let n = spec.geometry.dim_state;
    let nc = spec.geometry.dim_control;
    let n_cells = grid.n_cells();

    let per_level: Vec<(Vec<f64>, usize, f64)> = (0..grid.n_t)
        .into_par_iter()
        .map(|level| -> Result<(Vec<f64>, usize, f64)> {
            let t = grid.time(level);
            let mut grad = vec![0.0; n_cells * n];
            let mut hess = vec![0.0; n_cells * n * n];
            slice_gradient(&grid, v.slice(level), &mut grad);
            slice_hessian(&grid, v.slice(level), &mut hess);
            let mut out = vec![0.0; n_cells * nc];
            let mut cs = CoState::zero(n);
            let mut x = vec![0.0; n];
            let mut ties = 0;
            let mut max_gn = 0.0f64;
            for s in 0..n_cells {
                grid.node_position(s, &mut x);
                for i in 0..n {
                    cs.p[i] = -grad[s * n + i];
                }
                for i in 0..n * n {
                    cs.big_p[i] = -hess[s * n * n + i];
                }
                let outcome =
                    argmax_g(spec, t, &x, &cs, u.node(level, s), cfg).map_err(|e| match e {
                        Error::ArgmaxFailure { best_residual, .. } => Error::ArgmaxFailure {
                            best_residual,
                            location: format!("level {level}, node {s}"),
                        },
                        other => other,
                    })?;
                out[s * nc..(s + 1) * nc].copy_from_slice(&outcome.u);
                if outcome.tie_broken {
                    ties += 1;
                }
                max_gn = max_gn.max(outcome.grad_norm);
            }
            Ok((out, ties, max_gn))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut field = ControlField::zeros(grid);
    let mut report = LocalOptReport::default();
    for (level, (vals, ties, gn)) in per_level.into_iter().enumerate() {
        let off = level * n_cells * nc;
        field.values_mut()[off..off + n_cells * nc].copy_from_slice(&vals);
        report.ties_broken += ties;
        report.max_grad_norm = report.max_grad_norm.max(gn);
    }
    Ok((field, report))
}

/// Sup-norm residual of the optimality equation over interior time levels:
/// `max | -dV/dt + G(t, x, u_diamond, -grad V, -hess V) |` with a central
/// time difference and the full-multistart maximizer.
pub fn hjb_residual(spec: &ProblemSpec, v: &ScalarField, cfg: &ArgmaxConfig) -> Result<f64> {
    cfg.validate()?;
    let grid = v.grid;
    let n = spec.geometry.dim_state;
    let nc = spec.geometry.dim_control;
    let n_cells = grid.n_cells();
    let two_dt = 2.0 * grid.dt();
    if grid.n_t < 3 {
        return Err(Error::InvalidArgument("need at least 3 time levels for the residual".into()));
    }

    let worst = (1..grid.n_t - 1)
        .into_par_iter()
        .map(|level| -> Result<f64> {
            let t = grid.time(level);
            let mut grad = vec![0.0; n_cells * n];
            let mut hess = vec![0.0; n_cells * n * n];
            slice_gradient(&grid, v.slice(level), &mut grad);
            slice_hessian(&grid, v.slice(level), &mut hess);
            let mut cs = CoState::zero(n);
            let mut x = vec![0.0; n];
            let zero = vec![0.0; nc];
            let mut level_worst = 0.0f64;
            for s in 0..n_cells {
                grid.node_position(s, &mut x);
                for i in 0..n {
                    cs.p[i] = -grad[s * n + i];
                }
                for i in 0..n * n {
                    cs.big_p[i] = -hess[s * n * n + i];
                }
                let outcome = argmax_g(spec, t, &x, &cs, &zero, cfg)?;
                let dt_v = (v.slice(level + 1)[s] - v.slice(level - 1)[s]) / two_dt;
                level_worst = level_worst.max((-dt_v + outcome.g_value).abs());
            }
            Ok(level_worst)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(worst.into_iter().fold(0.0, f64::max))
}

/// Both stationary branches of the scalar quartic instrument for a given
/// value-function slope. `sign(0)` is taken as `+1`: at `v_x = 0` the two
/// branches have equal objective value and the convention documents the pick.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuarticBranches {
    /// Globally optimal branch.
    pub u_star: f64,
    /// Locally-but-not-globally optimal branch.
    pub u_tilde: f64,
}

pub fn quartic_closed_forms(v_x: f64) -> QuarticBranches {
    let sign = if v_x >= 0.0 { 1.0 } else { -1.0 };
    let root = (v_x * v_x + 4.0).sqrt();
    QuarticBranches { u_star: 0.5 * (-v_x - sign * root), u_tilde: 0.5 * (-v_x + sign * root) }
}
