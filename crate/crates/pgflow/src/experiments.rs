//! Scripted experiments over the built-in problems: the two-basin stall
//! demonstration, the exponential-rate measurement on the strongly concave
//! problem, and the regularity probes that exercise the coupling, value
//! regularity, quadratic growth, and implicit-map bounds empirically.
//!
//! Every experiment is reproducible bit for bit from its config and seed, and
//! every reported metric carries an explicit threshold and verdict.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::digest;
use crate::error::Result;
use crate::field::ControlField;
use crate::flow::{cost_j, run_flow, FlowConfig, FlowTrace, Termination};
use crate::grid::SpaceTimeGrid;
use crate::linalg::fit_line;
use crate::local_opt::{local_optimal_field, ArgmaxConfig};
use crate::pde::{solve_hj, SolverConfig};
use crate::problems::{build_problem_with_horizon, BuiltinProblem};
use crate::rng::{purpose, CounterRng};
use crate::sampler::coupling_experiment;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cmp {
    /// Pass when `value < threshold`.
    Below,
    /// Pass when `value > threshold`.
    Above,
}

#[derive(Clone, Debug)]
pub struct MetricRecord {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub cmp: Cmp,
    pub pass: bool,
}

/// Experiment output: named metrics with thresholds and verdicts plus paths
/// of any artifacts written.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub name: String,
    pub digest: String,
    pub metrics: Vec<MetricRecord>,
    pub artifacts: Vec<PathBuf>,
}

impl ExperimentReport {
    pub fn new(name: &str, digest: String) -> Self {
        Self { name: name.into(), digest, metrics: Vec::new(), artifacts: Vec::new() }
    }

    pub fn push(&mut self, name: &str, value: f64, cmp: Cmp, threshold: f64) {
        let pass = match cmp {
            Cmp::Below => value < threshold,
            Cmp::Above => value > threshold,
        };
        self.metrics.push(MetricRecord { name: name.into(), value, threshold, cmp, pass });
    }

    pub fn passed(&self) -> bool {
        self.metrics.iter().all(|m| m.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# digest={}\nmetric,value,threshold,cmp,pass\n", self.digest);
        for m in &self.metrics {
            let cmp = match m.cmp {
                Cmp::Below => "<",
                Cmp::Above => ">",
            };
            let _ = writeln!(out, "{},{:e},{:e},{cmp},{}", m.name, m.value, m.threshold, m.pass);
        }
        out
    }

    pub fn verdict_summary(&self) -> String {
        let mut out = format!("experiment {} [{}]\n", self.name, self.digest);
        for m in &self.metrics {
            let cmp = match m.cmp {
                Cmp::Below => "<",
                Cmp::Above => ">",
            };
            let _ = writeln!(
                out,
                "  [{}] {:<38} {:>13.6e} {cmp} {:.3e}",
                if m.pass { "PASS" } else { "FAIL" },
                m.name,
                m.value,
                m.threshold
            );
        }
        out
    }
}

/// Seeded smooth random control: a handful of low Fourier modes per axis with
/// a linear time profile. Smooth, periodic, and bounded by `amplitude`.
pub fn random_smooth_control(grid: SpaceTimeGrid, amplitude: f64, seed: u64) -> Result<ControlField> {
    let rng = CounterRng::new(seed);
    let n = grid.geometry.dim_state;
    let nc = grid.geometry.dim_control;
    let horizon = grid.horizon;
    let mut coeff = Vec::new();
    for c in 0..nc {
        for axis in 0..n {
            for k in 1..=3u64 {
                let tag = (c * n) as u64 * 8 + axis as u64 * 8 + k;
                coeff.push((
                    rng.uniform_in(-1.0, 1.0, purpose::SMOOTH_FIELD, seed, tag, 0),
                    rng.uniform_in(-1.0, 1.0, purpose::SMOOTH_FIELD, seed, tag, 1),
                    rng.uniform_in(-1.0, 1.0, purpose::SMOOTH_FIELD, seed, tag, 2),
                ));
            }
        }
    }
    ControlField::from_fn(grid, move |t, x, out| {
        let mut idx = 0;
        for uc in out.iter_mut() {
            let mut acc = 0.0;
            for axis in 0..n {
                for k in 1..=3usize {
                    let (a, b, c) = coeff[idx];
                    idx += 1;
                    let phase = 2.0 * std::f64::consts::PI * k as f64 * x[axis];
                    let time_profile = 1.0 + 0.5 * c * (t / horizon - 0.5);
                    acc += (a * phase.cos() + b * phase.sin()) * time_profile
                        / (k * k) as f64;
                }
            }
            *uc = amplitude * acc / n as f64;
        }
    })
}

fn write_trace_csv(trace: &FlowTrace, digest: &str, path: &PathBuf) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# digest={digest}")?;
    writeln!(f, "{}", crate::flow::FlowRecord::CSV_HEADER)?;
    for r in &trace.records {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Two-basin experiment
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TwoBasinConfig {
    pub n_t: usize,
    pub n_x: usize,
    pub horizon: f64,
    pub dtau: f64,
    pub stop_grad_norm: f64,
    pub max_steps: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for TwoBasinConfig {
    fn default() -> Self {
        // 64 cells keep the gradient's consistency floor (~3e-4) comfortably
        // under the 1e-3 stationarity target; the step is small enough that
        // no node can hop the double-well barrier in one update, which is the
        // basin-trapping behaviour the experiment demonstrates
        Self {
            n_t: 65,
            n_x: 64,
            horizon: 0.2,
            dtau: 0.2,
            stop_grad_norm: 1e-3,
            max_steps: 400,
            out_dir: None,
        }
    }
}

impl TwoBasinConfig {
    fn digest(&self) -> String {
        digest::digest_pairs(
            [
                ("experiment", "two_basin".to_string()),
                ("n_t", self.n_t.to_string()),
                ("n_x", self.n_x.to_string()),
                ("horizon", format!("{}", self.horizon)),
                ("dtau", format!("{}", self.dtau)),
                ("stop_grad_norm", format!("{}", self.stop_grad_norm)),
                ("max_steps", self.max_steps.to_string()),
            ]
            .iter()
            .map(|(k, v)| (*k, v.as_str())),
        )
    }
}

/// Flow the quartic trap from the two constant starts `+1` and `-1`. Both
/// runs reach a critical point, but they land in different branches of the
/// pointwise maximization and the branch costs differ; the run that is
/// farther from its full-multistart local optimal field is the one stuck on
/// the suboptimal branch, and its cost must be strictly larger.
pub fn run_two_basin_experiment(cfg: &TwoBasinConfig) -> Result<ExperimentReport> {
    let built = build_problem_with_horizon("quartic_trap", cfg.horizon)?;
    let spec = &built.spec;
    let grid = SpaceTimeGrid::new(spec.geometry, cfg.horizon, cfg.n_t, cfg.n_x)?;
    let mut report = ExperimentReport::new("two_basin", cfg.digest());

    let mut flow_cfg = FlowConfig::defaults(spec.geometry.dim_control);
    flow_cfg.dtau = cfg.dtau;
    flow_cfg.max_steps = cfg.max_steps;
    flow_cfg.stop_grad_norm = cfg.stop_grad_norm;
    // distance-to-local diagnostics restricted to the incumbent basin: the
    // flow is local and each run must register as stationary in its own basin
    flow_cfg.diag_argmax = ArgmaxConfig::incumbent_only(1);

    let run = |start: f64| -> Result<FlowTrace> {
        let u0 = ControlField::constant(grid, &[start])?;
        run_flow(spec, u0, &flow_cfg)
    };
    let trace_a = run(1.0)?;
    let trace_b = run(-1.0)?;

    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        let pa = dir.join("two_basin_run_a.csv");
        let pb = dir.join("two_basin_run_b.csv");
        write_trace_csv(&trace_a, &report.digest, &pa)?;
        write_trace_csv(&trace_b, &report.digest, &pb)?;
        report.artifacts.push(pa);
        report.artifacts.push(pb);
    }

    let (ja, jb) = (trace_a.final_state.j, trace_b.final_state.j);
    report.push("run_a_grad_norm", trace_a.final_state.grad_norm, Cmp::Below, 1e-3);
    report.push("run_b_grad_norm", trace_b.final_state.grad_norm, Cmp::Below, 1e-3);
    report.push(
        "run_a_incumbent_dist",
        trace_a.final_state.dist_to_local,
        Cmp::Below,
        1e-3,
    );
    report.push(
        "run_b_incumbent_dist",
        trace_b.final_state.dist_to_local,
        Cmp::Below,
        1e-3,
    );
    report.push("basin_value_gap", (ja - jb).abs(), Cmp::Above, 1e-4);

    // Identify the tilde run by the severity of its maximum-condition
    // violation: the density-weighted integral of G(u_diamond) - G(u) with
    // the full multistart maximizer. Raw distance to u_diamond only counts
    // the area of the wrong-branch set; the violation integral weights it by
    // how much objective is left on the table, which is what the cost sees.
    let multistart = ArgmaxConfig::multistart(1);
    let violation = |trace: &FlowTrace| -> Result<(f64, f64)> {
        let state = &trace.final_state;
        let (diamond, _) = local_optimal_field(spec, &state.u, &state.v, &multistart)?;
        let n = spec.geometry.dim_state;
        let mut ws = spec.scratch();
        let mut cs = crate::problem::CoState::zero(n);
        let mut x = vec![0.0; n];
        let mut acc = 0.0;
        let cell = grid.cell_volume();
        for level in 0..grid.n_t {
            let t = grid.time(level);
            let w = if level == 0 || level == grid.n_t - 1 { 0.5 } else { 1.0 };
            let grad = state.v.gradient_x(level);
            let hess = state.v.hessian_x(level);
            for s in 0..grid.n_cells() {
                grid.node_position(s, &mut x);
                for i in 0..n {
                    cs.p[i] = -grad[s * n + i];
                }
                for i in 0..n * n {
                    cs.big_p[i] = -hess[s * n * n + i];
                }
                let g_inc = spec.eval_g_scratch(t, &x, state.u.node(level, s), &cs, &mut ws)?;
                let g_dia = spec.eval_g_scratch(t, &x, diamond.node(level, s), &cs, &mut ws)?;
                acc += w * grid.dt() * cell * state.rho.slice(level)[s] * (g_dia - g_inc);
            }
        }
        Ok((acc, state.u.l2_distance(&diamond)))
    };
    let (viol_a, dist_a) = violation(&trace_a)?;
    let (viol_b, dist_b) = violation(&trace_b)?;
    let (j_tilde, j_other) = if viol_a > viol_b { (ja, jb) } else { (jb, ja) };
    report.push("tilde_branch_excess_cost", j_tilde - j_other, Cmp::Above, 1e-4);
    report.push("tilde_run_multistart_dist", dist_a.max(dist_b), Cmp::Above, 1e-2);
    report.push(
        "tilde_run_violation_ratio",
        viol_a.max(viol_b) / viol_a.min(viol_b).max(1e-300),
        Cmp::Above,
        1.0,
    );

    // closed-form consistency of the pointwise maximizer on 100 probes
    let rng = CounterRng::new(2718);
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let v_x = rng.uniform_in(-3.0, 3.0, purpose::PROBE, i, 0, 0);
        let cs = crate::problem::CoState { p: vec![-v_x], big_p: vec![0.0] };
        let out = crate::local_opt::argmax_g(spec, 0.0, &[0.5], &cs, &[0.0], &multistart)?;
        let closed = crate::local_opt::quartic_closed_forms(v_x);
        worst = worst.max((out.u[0] - closed.u_star).abs());
    }
    report.push("argmax_vs_closed_form_sup", worst, Cmp::Below, 1e-8);

    Ok(report)
}

// ---------------------------------------------------------------------------
// Rate experiment
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct RateConfig {
    pub n_t: usize,
    pub n_x: usize,
    pub horizon: f64,
    pub dtau: f64,
    pub stop_grad_norm: f64,
    pub max_steps: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RateConfig {
    fn default() -> Self {
        // moderate dtau gives a long clean exponential stretch for the fit
        Self {
            n_t: 65,
            n_x: 48,
            horizon: 0.3,
            dtau: 0.3,
            stop_grad_norm: 1e-5,
            max_steps: 400,
            out_dir: None,
        }
    }
}

impl RateConfig {
    fn digest(&self) -> String {
        digest::digest_pairs(
            [
                ("experiment", "rate".to_string()),
                ("n_t", self.n_t.to_string()),
                ("n_x", self.n_x.to_string()),
                ("horizon", format!("{}", self.horizon)),
                ("dtau", format!("{}", self.dtau)),
                ("stop_grad_norm", format!("{}", self.stop_grad_norm)),
                ("max_steps", self.max_steps.to_string()),
            ]
            .iter()
            .map(|(k, v)| (*k, v.as_str())),
        )
    }
}

/// Discrete-optimum reference for gap diagnostics: polish the sampled
/// closed-form optimum by flowing it to stationarity on the given grid.
pub fn polished_reference(
    built: &BuiltinProblem,
    grid: SpaceTimeGrid,
) -> Result<(ControlField, f64)> {
    let oracle = built.oracle.as_ref().expect("reference requires a manufactured oracle");
    let u_star = oracle.u_star_field(grid)?;
    let mut cfg = FlowConfig::defaults(built.spec.geometry.dim_control);
    cfg.dtau = 0.5;
    cfg.stop_grad_norm = 1e-9;
    cfg.max_steps = 80;
    cfg.stall_min_decrease = 0.0;
    let trace = run_flow(&built.spec, u_star, &cfg)?;
    let state = trace.final_state;
    Ok((state.u, state.j))
}

/// Measure the exponential decay of the optimality gap on the manufactured
/// strongly concave problem: fit `log(J - J*)` over the middle 60% of the
/// trace and require a negative slope with a tight linear fit.
pub fn run_rate_experiment(cfg: &RateConfig) -> Result<ExperimentReport> {
    let built = build_problem_with_horizon("manufactured_concave", cfg.horizon)?;
    let spec = &built.spec;
    let oracle = built.oracle.as_ref().unwrap();
    let grid = SpaceTimeGrid::new(spec.geometry, cfg.horizon, cfg.n_t, cfg.n_x)?;
    let mut report = ExperimentReport::new("rate", cfg.digest());

    let (_, j_star_ref) = polished_reference(&built, grid)?;

    let mut flow_cfg = FlowConfig::defaults(1);
    flow_cfg.dtau = cfg.dtau;
    flow_cfg.max_steps = cfg.max_steps;
    flow_cfg.stop_grad_norm = cfg.stop_grad_norm;
    let u0 = ControlField::zeros(grid);
    let trace = run_flow(spec, u0, &flow_cfg)?;

    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        let p = dir.join("rate_trace.csv");
        write_trace_csv(&trace, &report.digest, &p)?;
        report.artifacts.push(p);
    }

    // log-linear fit of the gap over the middle 60% of the recorded steps
    let gaps: Vec<(f64, f64)> = trace
        .records
        .iter()
        .filter_map(|r| {
            let gap = r.j - j_star_ref;
            (gap > 0.0).then_some((r.tau, gap.ln()))
        })
        .collect();
    let lo = gaps.len() / 5;
    let hi = (gaps.len() * 4) / 5;
    let window = &gaps[lo..hi.max(lo + 2).min(gaps.len())];
    let xs: Vec<f64> = window.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = window.iter().map(|p| p.1).collect();
    let (slope, _, r2) = fit_line(&xs, &ys);
    let c_hat = -slope;

    let u_star_grid = oracle.u_star_field(grid)?;
    let final_dist_star = trace.final_state.u.l2_distance(&u_star_grid);
    let max_j_increase = trace
        .records
        .windows(2)
        .map(|w| w[1].j - w[0].j)
        .fold(f64::NEG_INFINITY, f64::max);

    report.push("c_hat", c_hat, Cmp::Above, 0.0);
    report.push("log_fit_r2", r2, Cmp::Above, 0.95);
    report.push("final_dist_to_u_star", final_dist_star, Cmp::Below, 1e-2);
    report.push("final_dist_to_local", trace.final_state.dist_to_local, Cmp::Below, 1e-3);
    report.push("max_j_increase", max_j_increase, Cmp::Below, 1e-12);
    report.push(
        "terminated_by_grad_norm",
        if trace.termination == Termination::GradNorm { 1.0 } else { 0.0 },
        Cmp::Above,
        0.5,
    );

    Ok(report)
}

// ---------------------------------------------------------------------------
// Regularity probes
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct RegularityConfig {
    pub n_t: usize,
    pub n_x: usize,
    pub horizon: f64,
    pub n_pairs: usize,
    pub n_scales: usize,
    pub seed: u64,
    pub coupling_paths: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RegularityConfig {
    fn default() -> Self {
        Self {
            n_t: 33,
            n_x: 32,
            horizon: 0.3,
            n_pairs: 20,
            n_scales: 10,
            seed: 424242,
            coupling_paths: 4000,
            out_dir: None,
        }
    }
}

impl RegularityConfig {
    fn digest(&self) -> String {
        digest::digest_pairs(
            [
                ("experiment", "regularity".to_string()),
                ("n_t", self.n_t.to_string()),
                ("n_x", self.n_x.to_string()),
                ("horizon", format!("{}", self.horizon)),
                ("n_pairs", self.n_pairs.to_string()),
                ("n_scales", self.n_scales.to_string()),
                ("seed", self.seed.to_string()),
                ("coupling_paths", self.coupling_paths.to_string()),
            ]
            .iter()
            .map(|(k, v)| (*k, v.as_str())),
        )
    }
}

struct ProbeRatios {
    /// max over pairs of `|V1 - V2|_{H2} / |u1 - u2|_{L2}`
    value_regularity: f64,
    /// max over pairs and nodes of the implicit-map quotient
    implicit_map: f64,
}

fn probe_ratios(
    built: &BuiltinProblem,
    grid: SpaceTimeGrid,
    n_pairs: usize,
    seed: u64,
) -> Result<ProbeRatios> {
    let spec = &built.spec;
    let solver = SolverConfig::default();
    let argmax = ArgmaxConfig::multistart(spec.geometry.dim_control);
    let n = spec.geometry.dim_state;
    let mut value_regularity = 0.0f64;
    let mut implicit_map = 0.0f64;
    for pair in 0..n_pairs {
        let u1 = random_smooth_control(grid, 1.0, seed + 2 * pair as u64)?;
        let u2 = random_smooth_control(grid, 1.0, seed + 2 * pair as u64 + 1)?;
        let (v1, _) = solve_hj(spec, &u1, &solver)?;
        let (v2, _) = solve_hj(spec, &u2, &solver)?;
        let du = u1.l2_distance(&u2);
        if du > 1e-12 {
            value_regularity = value_regularity.max(v1.h2_distance(&v2) / du);
        }
        let (d1, _) = local_optimal_field(spec, &u1, &v1, &argmax)?;
        let (d2, _) = local_optimal_field(spec, &u2, &v2, &argmax)?;
        for level in 0..grid.n_t {
            let g1 = v1.gradient_x(level);
            let g2 = v2.gradient_x(level);
            let h1 = v1.hessian_x(level);
            let h2 = v2.hessian_x(level);
            for s in 0..grid.n_cells() {
                let mut dg = 0.0;
                for a in 0..n {
                    dg += (g1[s * n + a] - g2[s * n + a]).powi(2);
                }
                let mut dh = 0.0;
                for ab in 0..n * n {
                    dh += (h1[s * n * n + ab] - h2[s * n * n + ab]).powi(2);
                }
                let denom = dg.sqrt() + dh.sqrt();
                if denom < 1e-8 {
                    continue;
                }
                let mut dd = 0.0;
                for c in 0..spec.geometry.dim_control {
                    dd += (d1.node(level, s)[c] - d2.node(level, s)[c]).powi(2);
                }
                implicit_map = implicit_map.max(dd.sqrt() / denom);
            }
        }
    }
    Ok(ProbeRatios { value_regularity, implicit_map })
}

/// Empirical probes of the appendix bounds around the manufactured optimum:
/// common-noise coupling distances, the value-function regularity quotient,
/// the quadratic growth of the cost, the `1 + alpha` value-regularity
/// exponent (`alpha = 1/(n+3)`), and the implicit-map Lipschitz quotient.
/// Quotients must stay stable (< 2x growth) under one grid refinement.
pub fn run_regularity_probes(cfg: &RegularityConfig) -> Result<ExperimentReport> {
    let built = build_problem_with_horizon("manufactured_concave", cfg.horizon)?;
    let spec = &built.spec;
    let grid = SpaceTimeGrid::new(spec.geometry, cfg.horizon, cfg.n_t, cfg.n_x)?;
    let mut report = ExperimentReport::new("regularity", cfg.digest());
    let solver = SolverConfig::default();

    // reference: polished discrete optimum, so the scale sweeps measure the
    // growth exponents rather than discretization bias
    let (u_ref, j_ref) = polished_reference(&built, grid)?;
    let (v_ref, _) = solve_hj(spec, &u_ref, &solver)?;

    // direction field, normalized in L2
    let mut phi = random_smooth_control(grid, 1.0, cfg.seed)?;
    let phi_norm = phi.l2_norm();
    phi.scale(1.0 / phi_norm);

    // --- quadratic growth of J and the 1+alpha exponent of V ---------------
    let mut log_eps = Vec::new();
    let mut log_jgap = Vec::new();
    let mut log_vgap = Vec::new();
    for k in 0..cfg.n_scales {
        // log-spaced scales in [0.05, 0.8]
        let frac = k as f64 / (cfg.n_scales - 1) as f64;
        let eps = 0.05 * (0.8f64 / 0.05).powf(frac);
        let mut u = u_ref.clone();
        u.axpy(eps, &phi);
        let (v, _) = solve_hj(spec, &u, &solver)?;
        let rho0 = vec![1.0; grid.n_cells()];
        let j = cost_j(&v, &rho0);
        let j_gap = j - j_ref;
        let v_gap = v.h2_distance(&v_ref);
        if j_gap > 0.0 && v_gap > 0.0 {
            log_eps.push(eps.ln());
            log_jgap.push(j_gap.ln());
            log_vgap.push(v_gap.ln());
        }
    }
    let (j_slope, _, _) = fit_line(&log_eps, &log_jgap);
    let (v_slope, _, _) = fit_line(&log_eps, &log_vgap);
    report.push("quadratic_growth_slope", j_slope, Cmp::Above, 1.9);
    // alpha = 1/(n+3) = 0.25 at n = 1; the exponent may exceed the bound
    // (the conjectured sharp value is 2), which still passes
    report.push("value_gap_slope", v_slope, Cmp::Above, 1.15);

    // --- coupling distances over shrinking perturbations (common noise) ----
    let mut sup_dists = Vec::new();
    for k in 0..5 {
        let eps = 0.4 / (1 << k) as f64;
        let mut u2 = u_ref.clone();
        u2.axpy(eps, &phi);
        let rec = coupling_experiment(
            spec,
            &u_ref,
            &u2,
            cfg.coupling_paths,
            2 * (grid.n_t - 1),
            cfg.seed,
        )?;
        sup_dists.push(rec.sup_mean_sq_dist);
    }
    let max_adjacent_ratio = sup_dists
        .windows(2)
        .map(|w| w[1] / w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    report.push("coupling_shrink_max_ratio", max_adjacent_ratio, Cmp::Below, 1.0);
    report.push("coupling_final_sup_dist", *sup_dists.last().unwrap(), Cmp::Below, sup_dists[0]);
    // Gronwall-style stability: sup-distance over squared control distance
    // stays within a 10x band across the five perturbation sizes
    let quotients: Vec<f64> = sup_dists
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let eps = 0.4 / (1 << k) as f64;
            d / (eps * eps)
        })
        .collect();
    let spread = quotients.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        / quotients.iter().cloned().fold(f64::INFINITY, f64::min);
    report.push("coupling_quotient_spread", spread, Cmp::Below, 10.0);

    // --- regularity/implicit quotients and their refinement stability ------
    let coarse = probe_ratios(&built, grid, cfg.n_pairs, cfg.seed)?;
    let fine_grid = SpaceTimeGrid::new(
        spec.geometry,
        cfg.horizon,
        (cfg.n_t - 1) * 4 + 1,
        cfg.n_x * 2,
    )?;
    let fine = probe_ratios(&built, fine_grid, cfg.n_pairs, cfg.seed)?;
    report.push("value_regularity_ratio", coarse.value_regularity, Cmp::Above, 0.0);
    report.push(
        "value_regularity_refinement_growth",
        fine.value_regularity / coarse.value_regularity,
        Cmp::Below,
        2.0,
    );
    report.push("implicit_map_ratio", coarse.implicit_map, Cmp::Above, 0.0);
    report.push(
        "implicit_map_refinement_growth",
        fine.implicit_map / coarse.implicit_map,
        Cmp::Below,
        2.0,
    );

    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        let p = dir.join("regularity_report.csv");
        std::fs::write(&p, report.to_csv())?;
        report.artifacts.push(p);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_controls_are_seeded_and_bounded() {
        let geom = crate::geometry::TorusGeometry::new(1, 1, 1).unwrap();
        let grid = SpaceTimeGrid::new(geom, 0.3, 5, 16).unwrap();
        let a = random_smooth_control(grid, 1.0, 7).unwrap();
        let b = random_smooth_control(grid, 1.0, 7).unwrap();
        assert_eq!(a.values(), b.values());
        let c = random_smooth_control(grid, 1.0, 8).unwrap();
        assert_ne!(a.values(), c.values());
        assert!(a.sup_norm() < 5.0);
    }

    #[test]
    fn report_verdicts_and_csv() {
        let mut r = ExperimentReport::new("demo", "abc".into());
        r.push("low_enough", 0.5, Cmp::Below, 1.0);
        r.push("high_enough", 2.0, Cmp::Above, 1.0);
        assert!(r.passed());
        r.push("fails", 3.0, Cmp::Below, 1.0);
        assert!(!r.passed());
        let csv = r.to_csv();
        assert!(csv.starts_with("# digest=abc"));
        assert!(csv.contains("fails,3e0,1e0,<,false"));
        assert!(r.verdict_summary().contains("[FAIL]"));
    }
}
