//! Functional-gradient consistency on every built-in problem: the assembled
//! `dJ/du = -rho grad_u G` must match central finite differences of the cost
//! along random smooth directions within 1% relative error at eps = 1e-4.
//! (The acceptance suite pins this for the quartic trap on the reference
//! grid; this target covers the other two built-ins, including the
//! control-dependent diffusion.)

use pgflow::experiments::random_smooth_control;
use pgflow::flow::{cost_j, functional_gradient};
use pgflow::pde::{solve_fp, solve_hj, SolverConfig};
use pgflow::problems::build_problem;
use pgflow::{ControlField, SpaceTimeGrid};

fn check_problem(name: &str, base_seed: u64) {
    let built = build_problem(name).unwrap();
    let spec = &built.spec;
    let grid = SpaceTimeGrid::new(spec.geometry, built.default_horizon, 64, 64).unwrap();
    let solver = SolverConfig::default();
    let rho0 = vec![1.0; grid.n_cells()];

    let u = random_smooth_control(grid, 0.6, base_seed).unwrap();
    let (v, _) = solve_hj(spec, &u, &solver).unwrap();
    let (rho, _) = solve_fp(spec, &u, &rho0, &solver).unwrap();
    let gradient = functional_gradient(spec, &u, &v, &rho).unwrap();

    const EPS: f64 = 1e-4;
    let j_at = |u_pert: &ControlField| {
        let (v_pert, _) = solve_hj(spec, u_pert, &solver).unwrap();
        cost_j(&v_pert, &rho0)
    };
    for dir in 0..5u64 {
        let phi = random_smooth_control(grid, 1.0, base_seed + 100 + dir).unwrap();
        let inner = gradient.l2_inner(&phi);
        let mut up = u.clone();
        up.axpy(EPS, &phi);
        let mut dn = u.clone();
        dn.axpy(-EPS, &phi);
        let fd = (j_at(&up) - j_at(&dn)) / (2.0 * EPS);
        let rel = (inner - fd).abs() / fd.abs();
        assert!(
            rel < 1e-2,
            "{name}, direction {dir}: inner {inner:.6e} vs fd {fd:.6e} (rel {rel:.3e})"
        );
    }
}

#[test]
fn manufactured_concave_gradient_matches_finite_differences() {
    check_problem("manufactured_concave", 41);
}

#[test]
fn controlled_diffusion_gradient_matches_finite_differences() {
    check_problem("controlled_diffusion_demo", 42);
}
