//! The four batch entry points. Exit-status contract: 0 success, 1 numeric or
//! solver failure, 2 configuration failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use pgflow::acceptance;
use pgflow::field::ControlField;
use pgflow::flow::{run_flow, FlowConfig, FlowRecord, Termination};
use pgflow::grid::SpaceTimeGrid;
use pgflow::local_opt::ArgmaxConfig;
use pgflow::pde::{solve_fp, solve_hj, SolveReport, SolverConfig};
use pgflow::problems::build_problem_with_horizon;
use pgflow::sampler::{estimate_j_mc, simulate};
use pgflow::BuiltinProblem;

use crate::config::{ConfigError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SOLVER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

pub enum CmdError {
    Config(String),
    Solver(String),
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        CmdError::Config(e.to_string())
    }
}

impl From<pgflow::Error> for CmdError {
    fn from(e: pgflow::Error) -> Self {
        use pgflow::Error::*;
        match e {
            InvalidArgument(_) | DimensionMismatch(_) | NotFound(_) | UnsupportedProblem(_) => {
                CmdError::Config(e.to_string())
            }
            other => CmdError::Solver(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::Solver(format!("io: {e}"))
    }
}

pub fn exit_code(r: Result<i32, CmdError>) -> i32 {
    match r {
        Ok(code) => code,
        Err(CmdError::Config(msg)) => {
            eprintln!("error: {msg}");
            EXIT_CONFIG
        }
        Err(CmdError::Solver(msg)) => {
            eprintln!("error: {msg}");
            EXIT_SOLVER
        }
    }
}

struct Problem {
    built: BuiltinProblem,
    grid: SpaceTimeGrid,
}

fn setup(cfg: &RunConfig) -> Result<Problem, CmdError> {
    let name = cfg.require("problem")?;
    let horizon_key: Option<f64> = cfg.get_opt_parse("horizon")?;
    let built = match horizon_key {
        Some(t) => build_problem_with_horizon(name, t)?,
        None => pgflow::build_problem(name)?,
    };
    let n_t: usize = cfg.get_parse("n_t", 64)?;
    let n_x: usize = cfg.get_parse("n_x", 64)?;
    let grid = SpaceTimeGrid::new(built.spec.geometry, built.default_horizon, n_t, n_x)?;
    Ok(Problem { built, grid })
}

fn solver_config(cfg: &RunConfig) -> Result<SolverConfig, CmdError> {
    let defaults = SolverConfig::default();
    Ok(SolverConfig {
        cfl_safety: cfg.get_parse("cfl_safety", defaults.cfl_safety)?,
        max_substeps_per_level: cfg
            .get_parse("max_substeps_per_level", defaults.max_substeps_per_level)?,
        mass_tolerance: cfg.get_parse("mass_tolerance", defaults.mass_tolerance)?,
    })
}

fn flow_config(cfg: &RunConfig, dim_control: usize) -> Result<FlowConfig, CmdError> {
    let mut flow = FlowConfig::defaults(dim_control);
    flow.dtau = cfg.get_parse("dtau", flow.dtau)?;
    flow.max_steps = cfg.get_parse("max_steps", flow.max_steps)?;
    flow.stop_grad_norm = cfg.get_parse("stop_grad_norm", flow.stop_grad_norm)?;
    flow.stall_window = cfg.get_parse("stall_window", flow.stall_window)?;
    flow.stall_min_decrease = cfg.get_parse("stall_min_decrease", flow.stall_min_decrease)?;
    flow.armijo = cfg.get_parse("armijo", flow.armijo)?;
    flow.v_monotone_tol = cfg.get_opt_parse("v_monotone_tol")?;
    flow.hjb_every = cfg.get_opt_parse("hjb_every")?;
    if cfg.get_parse("incumbent_only_diag", false)? {
        flow.diag_argmax = ArgmaxConfig::incumbent_only(dim_control);
    }
    flow.solver = solver_config(cfg)?;
    Ok(flow)
}

fn initial_control(
    cfg: &RunConfig,
    grid: SpaceTimeGrid,
    u_box: f64,
) -> Result<ControlField, CmdError> {
    let value: f64 = cfg.get_parse("control_const", 0.0)?;
    let u = ControlField::constant(grid, &vec![value; grid.geometry.dim_control])?;
    u.validate_box(u_box)
        .map_err(|e| CmdError::Config(format!("control_const: {e}")))?;
    Ok(u)
}

fn write_reports_csv(
    path: &Path,
    digest: &str,
    reports: &[&SolveReport],
) -> Result<(), CmdError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# digest={digest}")?;
    writeln!(f, "{}", SolveReport::CSV_HEADER)?;
    for r in reports {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

fn write_manifest(out: &Path, digest: &str, files: &[PathBuf]) -> Result<(), CmdError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("manifest.csv"))?);
    writeln!(f, "# digest={digest}")?;
    writeln!(f, "file")?;
    for p in files {
        writeln!(f, "{}", p.file_name().unwrap().to_string_lossy())?;
    }
    Ok(())
}

/// `solve`: one backward value solve and one forward density transport under
/// the configured constant control; dumps both fields (binary + CSV) and the
/// solver reports.
pub fn cmd_solve(cfg: &RunConfig) -> Result<i32, CmdError> {
    let p = setup(cfg)?;
    let solver = solver_config(cfg)?;
    let u = initial_control(cfg, p.grid, p.built.spec.u_box)?;
    let (v, hj_report) = solve_hj(&p.built.spec, &u, &solver)?;
    let rho0 = vec![1.0; p.grid.n_cells()];
    let (rho, fp_report) = solve_fp(&p.built.spec, &u, &rho0, &solver)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut files = Vec::new();
    let v_bin = cfg.out_dir.join("v.bin");
    v.dump(&v_bin)?;
    files.push(v_bin);
    let rho_bin = cfg.out_dir.join("rho.bin");
    rho.dump(&rho_bin)?;
    files.push(rho_bin);
    for (name, field) in [("v.csv", &v), ("rho.csv", &rho)] {
        let path = cfg.out_dir.join(name);
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
        field.export_csv(&mut f, &cfg.digest)?;
        files.push(path);
    }
    let reports = cfg.out_dir.join("solver_reports.csv");
    write_reports_csv(&reports, &cfg.digest, &[&hj_report, &fp_report])?;
    files.push(reports);
    write_manifest(&cfg.out_dir, &cfg.digest, &files)?;
    if fp_report.positivity_warning {
        eprintln!(
            "warning: density undershoot {:.3e} (under-resolved transport)",
            fp_report.min_density.unwrap_or(f64::NAN)
        );
    }
    println!("solve done: J = {:.9e}", pgflow::flow::cost_j(&v, &rho0));
    Ok(EXIT_OK)
}

/// `flow`: run the gradient flow and write the trace CSV plus the final
/// control dump. Exit 0 on gradient-norm stop or stall (a `maxed` flag marks
/// an exhausted step budget), 1 on a step failure.
pub fn cmd_flow(cfg: &RunConfig) -> Result<i32, CmdError> {
    let p = setup(cfg)?;
    let flow = flow_config(cfg, p.built.spec.geometry.dim_control)?;
    let u0 = initial_control(cfg, p.grid, p.built.spec.u_box)?;
    let trace = run_flow(&p.built.spec, u0, &flow)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let trace_path = cfg.out_dir.join("trace.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&trace_path)?);
    writeln!(f, "# digest={}", cfg.digest)?;
    writeln!(f, "{}", FlowRecord::CSV_HEADER)?;
    for r in &trace.records {
        writeln!(f, "{}", r.csv_row())?;
    }
    drop(f);
    let u_path = cfg.out_dir.join("u_final.bin");
    trace.final_state.u.dump(&u_path)?;
    write_manifest(&cfg.out_dir, &cfg.digest, &[trace_path, u_path])?;

    let final_rec = trace.final_record();
    match trace.termination {
        Termination::GradNorm => {
            println!("flow converged: grad_norm = {:.3e}, J = {:.9e}", final_rec.grad_norm, final_rec.j);
            Ok(EXIT_OK)
        }
        Termination::Stalled => {
            println!("flow stalled: J = {:.9e}", final_rec.j);
            Ok(EXIT_OK)
        }
        Termination::MaxSteps => {
            println!("flow maxed: step budget exhausted at J = {:.9e}", final_rec.j);
            Ok(EXIT_OK)
        }
        Termination::StepFailed(msg) => {
            eprintln!("error: {msg}");
            Ok(EXIT_SOLVER)
        }
    }
}

/// `simulate`: sample a trajectory ensemble under the configured control,
/// estimate the cost, and dump the batch.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<i32, CmdError> {
    let p = setup(cfg)?;
    let u = initial_control(cfg, p.grid, p.built.spec.u_box)?;
    let n_paths: usize = cfg.get_parse("n_paths", 1000)?;
    let n_steps: usize = cfg.get_parse("n_steps", 50)?;
    let seed: u64 = cfg.get_parse("seed", 0)?;
    let batch = simulate(&p.built.spec, &u, n_paths, n_steps, seed)?;
    let est = estimate_j_mc(&p.built.spec, &u, &batch)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let batch_path = cfg.out_dir.join("batch.bin");
    batch.dump(&batch_path)?;
    let est_path = cfg.out_dir.join("estimate.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&est_path)?);
    writeln!(f, "# digest={}", cfg.digest)?;
    writeln!(f, "n_paths,n_steps,seed,estimate,std_error")?;
    writeln!(f, "{n_paths},{n_steps},{seed},{:e},{:e}", est.estimate, est.std_error)?;
    drop(f);
    write_manifest(&cfg.out_dir, &cfg.digest, &[batch_path, est_path])?;
    println!("estimate = {:.9e} +- {:.3e}", est.estimate, est.std_error);
    Ok(EXIT_OK)
}

/// `verify`: run the acceptance criteria selected in the config (all by
/// default) and print the verdict table; nonzero exit on any failure.
pub fn cmd_verify(cfg: &RunConfig, list_only: bool) -> Result<i32, CmdError> {
    if list_only {
        for (id, name, blurb) in acceptance::CRITERIA {
            println!("{id}. {name}: {blurb}");
        }
        return Ok(EXIT_OK);
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut all_pass = true;
    let mut rows = Vec::new();
    for &id in &cfg.criteria {
        let outcome = acceptance::run_criterion(id)?;
        println!("{}", outcome.summary_line());
        for d in &outcome.details {
            println!("{d}");
        }
        all_pass &= outcome.passed;
        rows.push((outcome.id, outcome.name, outcome.passed, outcome.wall_s));
    }
    let verdict_path = cfg.out_dir.join("verify.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&verdict_path)?);
    writeln!(f, "# digest={}", cfg.digest)?;
    writeln!(f, "criterion,name,pass,wall_s")?;
    for (id, name, pass, wall) in rows {
        writeln!(f, "{id},{name},{pass},{wall:.3}")?;
    }
    println!("verdict: {}", if all_pass { "PASS" } else { "FAIL" });
    Ok(if all_pass { EXIT_OK } else { EXIT_SOLVER })
}
