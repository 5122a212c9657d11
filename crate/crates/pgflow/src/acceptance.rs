//! The acceptance suite: eight self-contained checks, each with pinned
//! tolerances, runnable from `cargo test` and from the `verify` subcommand.
//! Every check prints one pass/fail line; a check passes only if all of its
//! metrics pass, including its wall-clock budget.

use std::time::Instant;

use crate::error::Result;
use crate::experiments::{
    run_rate_experiment, run_regularity_probes, run_two_basin_experiment, Cmp, ExperimentReport,
    RateConfig, RegularityConfig, TwoBasinConfig,
};
use crate::field::{ControlField, ScalarField};
use crate::flow::{cost_j, run_flow, FlowConfig};
use crate::grid::SpaceTimeGrid;
use crate::pde::{solve_fp, solve_hj, SolverConfig};
use crate::problems::build_problem;
use crate::sampler::{estimate_j_mc, grid_pinned_batch, regression_update, simulate};

pub const CRITERIA: [(usize, &str, &str); 8] = [
    (1, "gradient-oracle", "functional gradient vs central finite differences of the cost"),
    (2, "descent-monotonicity", "200 damped steps: cost never increases, value increase calibrated"),
    (3, "two-basin", "both basins reach stationarity; the suboptimal branch costs strictly more"),
    (4, "pl-rate", "exponential decay of the optimality gap on the strongly concave problem"),
    (5, "conservation-positivity", "density transport conserves mass and stays positive"),
    (6, "mc-pde-consistency", "Monte Carlo cost brackets the PDE cost; identity-design regression"),
    (7, "lemma-probes", "coupling, regularity, quadratic growth, and implicit-map probes"),
    (8, "discretization-order", "solver errors shrink >= 3x under (dt/4, dx/2) refinement"),
];

#[derive(Clone, Debug)]
pub struct CriterionOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub wall_s: f64,
    pub details: Vec<String>,
}

impl CriterionOutcome {
    pub fn summary_line(&self) -> String {
        format!(
            "[{}] {}. {} ({:.1} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.wall_s
        )
    }
}

struct Check {
    details: Vec<String>,
    passed: bool,
}

impl Check {
    fn new() -> Self {
        Self { details: Vec::new(), passed: true }
    }

    fn below(&mut self, name: &str, value: f64, threshold: f64) {
        let ok = value < threshold;
        self.passed &= ok;
        self.details.push(format!(
            "  [{}] {:<44} {value:>13.6e} < {threshold:.3e}",
            if ok { "ok" } else { "FAIL" },
            name
        ));
    }

    fn above(&mut self, name: &str, value: f64, threshold: f64) {
        let ok = value > threshold;
        self.passed &= ok;
        self.details.push(format!(
            "  [{}] {:<44} {value:>13.6e} > {threshold:.3e}",
            if ok { "ok" } else { "FAIL" },
            name
        ));
    }

    fn absorb(&mut self, report: &ExperimentReport) {
        for m in &report.metrics {
            match m.cmp {
                Cmp::Below => self.below(&m.name, m.value, m.threshold),
                Cmp::Above => self.above(&m.name, m.value, m.threshold),
            }
        }
    }
}

fn uniform_density(grid: &SpaceTimeGrid) -> Vec<f64> {
    vec![1.0; grid.n_cells()]
}

// --- criterion 1 -----------------------------------------------------------

/// Quartic trap on the 64 x 64 reference grid: the assembled functional
/// gradient must match central finite differences of the cost along 5 random
/// smooth directions to 1% relative error at eps = 1e-4.
fn gradient_oracle(check: &mut Check) -> Result<()> {
    let built = build_problem("quartic_trap")?;
    let spec = &built.spec;
    let grid = SpaceTimeGrid::new(spec.geometry, built.default_horizon, 64, 64)?;
    let solver = SolverConfig::default();
    let rho0 = uniform_density(&grid);

    let u = crate::experiments::random_smooth_control(grid, 0.6, 91)?;
    let (v, _) = solve_hj(spec, &u, &solver)?;
    let (rho, _) = solve_fp(spec, &u, &rho0, &solver)?;
    let gradient = crate::flow::functional_gradient(spec, &u, &v, &rho)?;

    const EPS: f64 = 1e-4;
    for dir in 0..5u64 {
        let phi = crate::experiments::random_smooth_control(grid, 1.0, 1000 + dir)?;
        let inner = gradient.l2_inner(&phi);
        let j_at = |sign: f64| -> Result<f64> {
            let mut u_pert = u.clone();
            u_pert.axpy(sign * EPS, &phi);
            let (v_pert, _) = solve_hj(spec, &u_pert, &solver)?;
            Ok(cost_j(&v_pert, &rho0))
        };
        let fd = (j_at(1.0)? - j_at(-1.0)?) / (2.0 * EPS);
        let rel = (inner - fd).abs() / fd.abs();
        check.below(&format!("direction_{dir}_relative_error"), rel, 1e-2);
    }
    Ok(())
}

// --- criterion 2 -----------------------------------------------------------

/// 200 Armijo steps on the quartic trap: the cost must be nonincreasing to
/// 1e-12 per step and the pointwise value increase must stay below the
/// calibrated 1e-6 tolerance on every accepted step.
fn descent_monotonicity(check: &mut Check) -> Result<()> {
    let built = build_problem("quartic_trap")?;
    let spec = &built.spec;
    let grid = SpaceTimeGrid::new(spec.geometry, built.default_horizon, 64, 64)?;
    let mut cfg = FlowConfig::defaults(1);
    // calibrated step: 200 steps stay inside the healthy descent regime (the
    // assembled gradient is discretization-accurate, so long runs at a large
    // step would grind into its consistency floor)
    cfg.dtau = 0.012;
    cfg.max_steps = 200;
    cfg.stop_grad_norm = 1e-14; // run the full budget
    cfg.stall_min_decrease = 0.0;
    cfg.v_monotone_tol = Some(1e-6);
    let u0 = ControlField::constant(grid, &[1.0])?;
    let trace = run_flow(spec, u0, &cfg)?;

    let accepted_steps = trace.records.len() - 1;
    check.above("accepted_steps", accepted_steps as f64, 199.5);
    let max_increase = trace
        .records
        .windows(2)
        .map(|w| w[1].j - w[0].j)
        .fold(f64::NEG_INFINITY, f64::max);
    check.below("max_cost_increase_per_step", max_increase, 1e-12);
    let max_v_increase =
        trace.records.iter().map(|r| r.max_v_increase).fold(0.0f64, f64::max);
    check.below("max_pointwise_value_increase", max_v_increase, 1e-6 + 1e-15);
    Ok(())
}

// --- criterion 5 -----------------------------------------------------------

/// Every density transport in the suite: mass drift below 1e-8 per level and
/// strictly positive density from the uniform start, on all three built-in
/// problems under both a constant and a smooth bounded control.
fn conservation_positivity(check: &mut Check) -> Result<()> {
    let solver = SolverConfig::default();
    for name in crate::problems::BUILTIN_NAMES {
        let built = build_problem(name)?;
        let spec = &built.spec;
        let grid = SpaceTimeGrid::new(spec.geometry, built.default_horizon, 33, 32)?;
        let rho0 = uniform_density(&grid);
        let controls = [
            ControlField::constant(grid, &[0.5])?,
            crate::experiments::random_smooth_control(grid, 0.8, 7)?,
        ];
        for (i, u) in controls.iter().enumerate() {
            let (rho, report) = solve_fp(spec, u, &rho0, &solver)?;
            check.below(
                &format!("{name}_u{i}_mass_drift"),
                report.mass_drift_max.unwrap(),
                1e-8,
            );
            check.above(
                &format!("{name}_u{i}_min_density"),
                report.min_density.unwrap(),
                0.0,
            );
            rho.validate_density()?;
        }
    }
    Ok(())
}

// --- criterion 6 -----------------------------------------------------------

/// Monte Carlo against the PDE pathway on the quartic trap, plus the
/// identity-design oracle for the least-squares parametric update.
fn mc_pde_consistency(check: &mut Check) -> Result<()> {
    let built = build_problem("quartic_trap")?;
    let spec = &built.spec;
    let grid = SpaceTimeGrid::new(spec.geometry, built.default_horizon, 64, 64)?;
    let solver = SolverConfig::default();
    let rho0 = uniform_density(&grid);

    let u = crate::experiments::random_smooth_control(grid, 0.6, 17)?;
    let (v, _) = solve_hj(spec, &u, &solver)?;
    let j_pde = cost_j(&v, &rho0);
    let n_steps = 50;
    let batch = simulate(spec, &u, 10_000, n_steps, 777)?;
    let est = estimate_j_mc(spec, &u, &batch)?;
    let allowance = 3.0 * est.std_error + 5.0 * (batch.dt + grid.dx() * grid.dx());
    check.below("mc_vs_pde_gap", (est.estimate - j_pde).abs(), allowance);

    // identity design: samples pinned on every node with equal multiplicity
    let small = SpaceTimeGrid::new(spec.geometry, built.default_horizon, 33, 32)?;
    let u_small = crate::experiments::random_smooth_control(small, 0.6, 18)?;
    let (v_small, _) = solve_hj(spec, &u_small, &solver)?;
    let pinned = grid_pinned_batch(&small);
    let dtau = 0.3;
    let (updated, _) = regression_update(spec, &u_small, &v_small, &pinned, dtau)?;
    let ones = ScalarField::from_fn(small, crate::field::FieldRole::Generic, |_, _| 1.0)?;
    let exact_grad = crate::flow::functional_gradient(spec, &u_small, &v_small, &ones)?;
    let mut worst = 0.0f64;
    for level in 0..small.n_t - 1 {
        for s in 0..small.n_cells() {
            let expect = u_small.node(level, s)[0] - dtau * exact_grad.node(level, s)[0];
            worst = worst.max((updated.node(level, s)[0] - expect).abs());
        }
    }
    check.below("identity_design_nodewise_error", worst, 1e-8);
    Ok(())
}

// --- criterion 8 -----------------------------------------------------------

/// Both solvers against their analytic oracles: errors must shrink by at
/// least 3x under a simultaneous (dt/4, dx/2) refinement.
fn discretization_order(check: &mut Check) -> Result<()> {
    let solver = SolverConfig::default();

    // value solver against the manufactured closed form at its optimum
    let built = build_problem("manufactured_concave")?;
    let oracle = built.oracle.as_ref().unwrap();
    let hj_err = |n_t: usize, n_x: usize| -> Result<f64> {
        let grid = SpaceTimeGrid::new(built.spec.geometry, built.default_horizon, n_t, n_x)?;
        let u = oracle.u_star_field(grid)?;
        let (v, _) = solve_hj(&built.spec, &u, &solver)?;
        Ok(v.max_abs_diff(&oracle.v_star_field(grid)?))
    };
    let coarse = hj_err(17, 32)?;
    let fine = hj_err(65, 64)?;
    check.above("hj_refinement_ratio", coarse / fine, 3.0);

    // density solver against the decaying Fourier mode of the heat kernel
    let quartic = build_problem("quartic_trap")?; // sigma = sqrt(2) gives D = 1
    let fp_err = |n_t: usize, n_x: usize| -> Result<f64> {
        let grid = SpaceTimeGrid::new(quartic.spec.geometry, 0.05, n_t, n_x)?;
        let u = ControlField::zeros(grid); // b(0) = 0: pure diffusion
        let mut rho0 = vec![0.0; grid.n_cells()];
        let mut x = [0.0];
        for s in 0..grid.n_cells() {
            grid.node_position(s, &mut x);
            rho0[s] = 1.0 + 0.5 * (2.0 * std::f64::consts::PI * x[0]).cos();
        }
        let (rho, _) = solve_fp(&quartic.spec, &u, &rho0, &solver)?;
        let mut worst = 0.0f64;
        for level in 0..grid.n_t {
            let t = grid.time(level);
            let decay = (-4.0 * std::f64::consts::PI * std::f64::consts::PI * t).exp();
            for s in 0..grid.n_cells() {
                grid.node_position(s, &mut x);
                let exact = 1.0 + 0.5 * decay * (2.0 * std::f64::consts::PI * x[0]).cos();
                worst = worst.max((rho.slice(level)[s] - exact).abs());
            }
        }
        Ok(worst)
    };
    let coarse = fp_err(9, 16)?;
    let fine = fp_err(33, 32)?;
    check.above("fp_refinement_ratio", coarse / fine, 3.0);
    Ok(())
}

// --- runner ----------------------------------------------------------------

/// Wall-clock budgets per criterion, in seconds, from the stated runtime
/// limits (criteria without a stated limit get the suite-wide 10 minutes).
const BUDGETS_S: [f64; 8] = [60.0, 300.0, 300.0, 600.0, 600.0, 600.0, 600.0, 600.0];

pub fn run_criterion(id: usize) -> Result<CriterionOutcome> {
    let (_, name, _) = CRITERIA
        .iter()
        .find(|(i, _, _)| *i == id)
        .ok_or_else(|| crate::error::Error::NotFound(format!("criterion {id}")))?;
    let start = Instant::now();
    let mut check = Check::new();
    match id {
        1 => gradient_oracle(&mut check)?,
        2 => descent_monotonicity(&mut check)?,
        3 => check.absorb(&run_two_basin_experiment(&TwoBasinConfig::default())?),
        4 => check.absorb(&run_rate_experiment(&RateConfig::default())?),
        5 => conservation_positivity(&mut check)?,
        6 => mc_pde_consistency(&mut check)?,
        7 => check.absorb(&run_regularity_probes(&RegularityConfig::default())?),
        8 => discretization_order(&mut check)?,
        _ => unreachable!(),
    }
    let wall_s = start.elapsed().as_secs_f64();
    let budget = BUDGETS_S[id - 1];
    let in_budget = wall_s < budget;
    check.passed &= in_budget;
    check.details.push(format!(
        "  [{}] {:<44} {wall_s:>13.1} < {budget:.0} s",
        if in_budget { "ok" } else { "FAIL" },
        "wall_clock"
    ));
    Ok(CriterionOutcome { id, name, passed: check.passed, wall_s, details: check.details })
}

pub fn run_all() -> Result<Vec<CriterionOutcome>> {
    (1..=8).map(run_criterion).collect()
}
