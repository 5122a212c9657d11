//! The sampling pathway: Euler-Maruyama trajectory ensembles, Monte Carlo
//! cost estimates, the least-squares parametric update, and the common-noise
//! coupling experiment.
//!
//! All randomness is counter-based and keyed by `(seed, path, step,
//! component)`, so a batch is a pure function of its configuration: identical
//! seeds give bit-identical batches no matter how path generation is
//! scheduled. Reductions over paths run in path order to keep results
//! bit-reproducible as well.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{interp_weights, ControlField, ScalarField};
use crate::geometry::{torus_dist_sq, wrap_coord};
use crate::grid::SpaceTimeGrid;
use crate::problem::{CoState, ProblemSpec};
use crate::rng::{purpose, CounterRng};

pub const BATCH_MAGIC: &[u8; 8] = b"CTRLTRJ1";

/// A seeded ensemble of Euler-Maruyama paths with their Brownian increments.
#[derive(Clone, Debug)]
pub struct TrajectoryBatch {
    pub n_paths: usize,
    /// Number of Euler steps N; states carry N+1 time points.
    pub n_steps: usize,
    /// Simulation step `T / N`.
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub dim_state: usize,
    pub dim_noise: usize,
    /// Wrapped states, `n_paths x (N+1) x n`, all in `[0,1)^n`.
    pub states: Vec<f64>,
    /// Cumulative unwrapped displacement per path, `n_paths x n`; kept for
    /// moment tests where wrapping would hide the variance.
    pub unwrapped_displacement: Vec<f64>,
    /// Stored Brownian increments `sqrt(dt) xi`, `n_paths x N x m`, reused
    /// for common-random-number experiments.
    pub noise: Vec<f64>,
}

impl TrajectoryBatch {
    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let n = self.dim_state;
        let off = (path * (self.n_steps + 1) + step) * n;
        &self.states[off..off + n]
    }

    pub fn noise_increment(&self, path: usize, step: usize) -> &[f64] {
        let m = self.dim_noise;
        let off = (path * self.n_steps + step) * m;
        &self.noise[off..off + m]
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(BATCH_MAGIC)?;
        for v in [
            self.dim_state as u32,
            self.dim_noise as u32,
            self.n_paths as u32,
            self.n_steps as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.horizon.to_le_bytes())?;
        for v in self.states.iter().chain(&self.unwrapped_displacement).chain(&self.noise) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Sample an ensemble of trajectories under the control field `u`:
/// `x_{i+1} = x_i + b dt + sigma sqrt(dt) xi`, states wrapped to the torus,
/// initial points uniform from the seeded stream, controls evaluated by
/// interpolation at `(t_i, x_i)`.
pub fn simulate(
    spec: &ProblemSpec,
    u: &ControlField,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    if n_steps == 0 || n_paths == 0 {
        return Err(Error::InvalidArgument("need at least one path and one step".into()));
    }
    if spec.geometry != u.grid.geometry {
        return Err(Error::DimensionMismatch("control grid does not match problem".into()));
    }
    let n = spec.geometry.dim_state;
    let m = spec.geometry.dim_noise;
    let nc = spec.geometry.dim_control;
    let horizon = u.grid.horizon;
    let dt = horizon / n_steps as f64;
    let sqrt_dt = dt.sqrt();
    let rng = CounterRng::new(seed);

    let mut states = vec![0.0; n_paths * (n_steps + 1) * n];
    let mut unwrapped = vec![0.0; n_paths * n];
    let mut noise = vec![0.0; n_paths * n_steps * m];

    states
        .par_chunks_mut((n_steps + 1) * n)
        .zip(unwrapped.par_chunks_mut(n))
        .zip(noise.par_chunks_mut(n_steps * m))
        .enumerate()
        .try_for_each(|(path, ((xs, disp), xi))| -> Result<()> {
            let mut u_buf = vec![0.0; nc];
            let mut b = vec![0.0; n];
            let mut sigma = vec![0.0; n * m];
            for a in 0..n {
                xs[a] = rng.uniform(purpose::INIT_POSITION, path as u64, a as u64, 0);
            }
            for i in 0..n_steps {
                let t = i as f64 * dt;
                let (cur, rest) = xs[i * n..].split_at_mut(n);
                let next = &mut rest[..n];
                u.interpolate_into(t, cur, &mut u_buf)?;
                (spec.drift)(t, cur, &u_buf, &mut b);
                (spec.diffusion)(t, cur, &u_buf, &mut sigma);
                if !b.iter().all(|v| v.is_finite()) || !sigma.iter().all(|v| v.is_finite()) {
                    return Err(Error::Numeric(format!("coefficients on path {path}, step {i}")));
                }
                for c in 0..m {
                    xi[i * m + c] =
                        sqrt_dt * rng.standard_normal(purpose::NOISE, path as u64, i as u64, c as u64);
                }
                for a in 0..n {
                    let mut dxa = b[a] * dt;
                    for c in 0..m {
                        dxa += sigma[a * m + c] * xi[i * m + c];
                    }
                    disp[a] += dxa;
                    next[a] = wrap_coord(cur[a] + dxa);
                }
            }
            Ok(())
        })?;

    Ok(TrajectoryBatch {
        n_paths,
        n_steps,
        dt,
        horizon,
        seed,
        dim_state: n,
        dim_noise: m,
        states,
        unwrapped_displacement: unwrapped,
        noise,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// Monte Carlo estimate of the cost: left-endpoint quadrature of the running
/// cost along each path plus the terminal cost, averaged over paths. The
/// control is re-evaluated from `u`, so off-policy estimates (batch sampled
/// under a different control) are allowed and meaningful.
pub fn estimate_j_mc(spec: &ProblemSpec, u: &ControlField, batch: &TrajectoryBatch) -> Result<McEstimate> {
    let nc = spec.geometry.dim_control;
    let mut u_buf = vec![0.0; nc];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for path in 0..batch.n_paths {
        let mut cost = 0.0;
        for i in 0..batch.n_steps {
            let t = batch.time(i);
            let x = batch.state(path, i);
            u.interpolate_into(t, x, &mut u_buf)?;
            cost += (spec.running_cost)(t, x, &u_buf) * batch.dt;
        }
        cost += (spec.terminal_cost)(batch.state(path, batch.n_steps));
        if !cost.is_finite() {
            return Err(Error::Numeric(format!("path {path} cost")));
        }
        sum += cost;
        sum_sq += cost * cost;
    }
    let np = batch.n_paths as f64;
    let mean = sum / np;
    let var = if batch.n_paths > 1 { (sum_sq - np * mean * mean).max(0.0) / (np - 1.0) } else { 0.0 };
    Ok(McEstimate { estimate: mean, std_error: (var / np).sqrt() })
}

#[derive(Clone, Debug)]
pub struct RegressionReport {
    /// Grid nodes not touched by any sample hat.
    pub unvisited_nodes: usize,
    pub total_nodes: usize,
    pub cg_iterations: usize,
    pub lambda: f64,
}

/// Least-squares parameter update for the grid parametrization: fits
/// `Delta theta` so the hat-basis reconstruction matches `dtau grad_u G` at
/// every sample `(t_i, x_i)`, then returns `u + Delta theta`.
///
/// Sample frequency itself supplies the density weighting of the exact
/// pathway: samples arrive rho-distributed, so no explicit density factor
/// appears in the objective. The normal equations are regularized by
/// `1e-8 x trace-scale` and solved matrix-free by conjugate gradients with a
/// fixed reduction order.
pub fn regression_update(
    spec: &ProblemSpec,
    u_theta: &ControlField,
    v: &ScalarField,
    batch: &TrajectoryBatch,
    dtau: f64,
) -> Result<(ControlField, RegressionReport)> {
    let grid = u_theta.grid;
    if v.grid != grid {
        return Err(Error::DimensionMismatch("control and value grids differ".into()));
    }
    let n = spec.geometry.dim_state;
    let nc = spec.geometry.dim_control;
    let n_cells = grid.n_cells();
    let n_nodes = grid.n_t * n_cells;

    // precompute the value function's derivative fields once per level
    let grads: Vec<Vec<f64>> = (0..grid.n_t).map(|k| v.gradient_x(k)).collect();
    let hesses: Vec<Vec<f64>> = (0..grid.n_t).map(|k| v.hessian_x(k)).collect();

    let n_samples = batch.n_paths * batch.n_steps;
    let nnz = 2 * (1 << n);
    let mut row_nodes = vec![0u32; n_samples * nnz];
    let mut row_w = vec![0.0f64; n_samples * nnz];
    let mut rhs = vec![0.0f64; n_nodes * nc];
    let mut diag = vec![0.0f64; n_nodes];

    let mut ws = spec.scratch();
    let mut cs = CoState::zero(n);
    let mut u_buf = vec![0.0; nc];
    let mut g_buf = vec![0.0; nc];

    // assembly in path order: the sample set S_k excludes the terminal index
    let mut row = 0usize;
    for path in 0..batch.n_paths {
        for i in 0..batch.n_steps {
            let t = batch.time(i);
            let x = batch.state(path, i);
            let w = interp_weights(&grid, t, x)?;
            let (level, theta, corners, n_corners) = (w.level, w.theta, w.corners, w.n_corners);

            // costate interpolated from the precomputed derivative fields
            for a in 0..n {
                let mut lo = 0.0;
                let mut hi = 0.0;
                for &(idx, w) in &corners[..n_corners] {
                    lo += w * grads[level][idx * n + a];
                    hi += w * grads[level + 1][idx * n + a];
                }
                cs.p[a] = -((1.0 - theta) * lo + theta * hi);
            }
            for ab in 0..n * n {
                let mut lo = 0.0;
                let mut hi = 0.0;
                for &(idx, w) in &corners[..n_corners] {
                    lo += w * hesses[level][idx * n * n + ab];
                    hi += w * hesses[level + 1][idx * n * n + ab];
                }
                cs.big_p[ab] = -((1.0 - theta) * lo + theta * hi);
            }
            u_theta.interpolate_into(t, x, &mut u_buf)?;
            spec.grad_u_g_scratch(t, x, &u_buf, &cs, &mut ws, &mut g_buf)?;

            for (slot, &(idx, w)) in corners[..n_corners].iter().enumerate() {
                let node_lo = level * n_cells + idx;
                let node_hi = (level + 1) * n_cells + idx;
                let w_lo = w * (1.0 - theta);
                let w_hi = w * theta;
                row_nodes[row * nnz + 2 * slot] = node_lo as u32;
                row_w[row * nnz + 2 * slot] = w_lo;
                row_nodes[row * nnz + 2 * slot + 1] = node_hi as u32;
                row_w[row * nnz + 2 * slot + 1] = w_hi;
                diag[node_lo] += w_lo * w_lo;
                diag[node_hi] += w_hi * w_hi;
                for c in 0..nc {
                    let target = dtau * g_buf[c];
                    rhs[node_lo * nc + c] += w_lo * target;
                    rhs[node_hi * nc + c] += w_hi * target;
                }
            }
            row += 1;
        }
    }

    let trace: f64 = diag.iter().sum();
    let unvisited = diag.iter().filter(|&&d| d == 0.0).count();
    if trace <= 0.0 {
        return Err(Error::RegressionFailure { unvisited, total: n_nodes });
    }
    let lambda = 1e-8 * trace / n_nodes as f64;

    // conjugate gradients on (A^T A + lambda I) x = A^T y, one system per
    // control component, matrix-free over the stored rows
    let apply = |x: &[f64], out: &mut [f64]| {
        out.iter_mut().zip(x).for_each(|(o, xi)| *o = lambda * xi);
        for r in 0..n_samples {
            let base = r * nnz;
            let mut dot = 0.0;
            for k in 0..nnz {
                dot += row_w[base + k] * x[row_nodes[base + k] as usize];
            }
            if dot != 0.0 {
                for k in 0..nnz {
                    out[row_nodes[base + k] as usize] += row_w[base + k] * dot;
                }
            }
        }
    };

    let mut delta = vec![0.0; n_nodes * nc];
    let mut cg_iterations = 0;
    for c in 0..nc {
        let b: Vec<f64> = (0..n_nodes).map(|node| rhs[node * nc + c]).collect();
        let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if b_norm == 0.0 {
            continue;
        }
        let mut x = vec![0.0; n_nodes];
        let mut r = b.clone();
        let mut p = b.clone();
        let mut rs = r.iter().map(|v| v * v).sum::<f64>();
        let mut ap = vec![0.0; n_nodes];
        for _ in 0..2000 {
            cg_iterations += 1;
            apply(&p, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            let alpha = rs / pap;
            for i in 0..n_nodes {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rs_new: f64 = r.iter().map(|v| v * v).sum();
            if rs_new.sqrt() <= 1e-13 * b_norm {
                break;
            }
            let beta = rs_new / rs;
            rs = rs_new;
            for i in 0..n_nodes {
                p[i] = r[i] + beta * p[i];
            }
        }
        for node in 0..n_nodes {
            delta[node * nc + c] = x[node];
        }
    }

    let mut updated = u_theta.clone();
    for (uv, dv) in updated.values_mut().iter_mut().zip(&delta) {
        *uv += dv;
    }
    let report = RegressionReport {
        unvisited_nodes: unvisited,
        total_nodes: n_nodes,
        cg_iterations,
        lambda,
    };
    Ok((updated, report))
}

/// Result of simulating two controls under common noise and common initial
/// points.
#[derive(Clone, Copy, Debug)]
pub struct CouplingRecord {
    /// `sup_t mean |x1_t - x2_t|^2` in the wrapped (minimal-image) metric.
    pub sup_mean_sq_dist: f64,
    /// `|u1 - u2|_{L2}^2`.
    pub control_dist_sq: f64,
    /// Their ratio; absent when the controls coincide.
    pub ratio: Option<f64>,
}

/// Simulate `u1` and `u2` with identical seeds (hence identical Brownian
/// increments and initial points) and report how the trajectory clouds
/// separate relative to the control distance.
pub fn coupling_experiment(
    spec: &ProblemSpec,
    u1: &ControlField,
    u2: &ControlField,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<CouplingRecord> {
    if u1.grid != u2.grid {
        return Err(Error::DimensionMismatch("controls live on different grids".into()));
    }
    let b1 = simulate(spec, u1, n_paths, n_steps, seed)?;
    let b2 = simulate(spec, u2, n_paths, n_steps, seed)?;
    let mut sup = 0.0f64;
    for step in 0..=n_steps {
        let mut acc = 0.0;
        for path in 0..n_paths {
            acc += torus_dist_sq(b1.state(path, step), b2.state(path, step));
        }
        sup = sup.max(acc / n_paths as f64);
    }
    let du = u1.l2_distance(u2);
    let control_dist_sq = du * du;
    let ratio = if control_dist_sq > 0.0 { Some(sup / control_dist_sq) } else { None };
    Ok(CouplingRecord { sup_mean_sq_dist: sup, control_dist_sq, ratio })
}

/// Synthetic batch whose samples sit exactly on the grid nodes with equal
/// multiplicity: path `j` stays pinned at node `j` for all time, and the
/// simulation step matches the level spacing. Under the hat basis this makes
/// the regression's design matrix the identity, which is the analytic oracle
/// for the parametric update.
pub fn grid_pinned_batch(grid: &SpaceTimeGrid) -> TrajectoryBatch {
    let n = grid.geometry.dim_state;
    let m = grid.geometry.dim_noise;
    let n_paths = grid.n_cells();
    let n_steps = grid.n_t - 1;
    let mut states = vec![0.0; n_paths * (n_steps + 1) * n];
    let mut x = vec![0.0; n];
    for path in 0..n_paths {
        grid.node_position(path, &mut x);
        for step in 0..=n_steps {
            let off = (path * (n_steps + 1) + step) * n;
            states[off..off + n].copy_from_slice(&x);
        }
    }
    TrajectoryBatch {
        n_paths,
        n_steps,
        dt: grid.dt(),
        horizon: grid.horizon,
        seed: 0,
        dim_state: n,
        dim_noise: m,
        states,
        unwrapped_displacement: vec![0.0; n_paths * n],
        noise: vec![0.0; n_paths * n_steps * m],
    }
}
