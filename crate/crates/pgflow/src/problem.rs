//! Control problem definitions and the pointwise Hamiltonian algebra.
//!
//! A problem supplies its coefficients as pure callbacks `(t, x, u) -> value`
//! together with analytic u-derivatives. Derivatives in x are never required:
//! the gradient formula consumes only u-derivatives of the coefficients and
//! finite differences of the value function.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::TorusGeometry;
use crate::linalg;
use crate::rng::{purpose, CounterRng};

/// Scalar coefficient callback `(t, x, u) -> f64`.
pub type ScalarFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;
/// Terminal cost callback `x -> f64`.
pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Tensor coefficient callback writing a flat row-major array.
pub type TensorFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Costate at a point: `p = -grad V` and `P = -hess V` as consumed by the
/// generalized Hamiltonian.
#[derive(Clone, Debug)]
pub struct CoState {
    /// Negative value gradient, length n.
    pub p: Vec<f64>,
    /// Negative value Hessian, row-major n x n, symmetric.
    pub big_p: Vec<f64>,
}

impl CoState {
    pub fn zero(n: usize) -> Self {
        Self { p: vec![0.0; n], big_p: vec![0.0; n * n] }
    }

    /// Build from raw value-function derivatives (note the sign flips).
    pub fn from_value_derivatives(grad_v: &[f64], hess_v: &[f64]) -> Self {
        let n = grad_v.len();
        debug_assert_eq!(hess_v.len(), n * n);
        let mut big_p = vec![0.0; n * n];
        // symmetrize so the stored P is exactly symmetric
        for i in 0..n {
            for j in 0..n {
                big_p[i * n + j] = -0.5 * (hess_v[i * n + j] + hess_v[j * n + i]);
            }
        }
        Self { p: grad_v.iter().map(|g| -g).collect(), big_p }
    }
}

/// Reusable buffers for the pointwise Hamiltonian evaluations; one per worker
/// in hot loops.
#[derive(Clone, Debug)]
pub struct Scratch {
    pub b: Vec<f64>,
    pub sigma: Vec<f64>,
    pub d: Vec<f64>,
    pub gub: Vec<f64>,
    pub gusig: Vec<f64>,
    pub gur: Vec<f64>,
    pub u_probe: Vec<f64>,
    pub grad_lo: Vec<f64>,
    pub grad_hi: Vec<f64>,
}

impl Scratch {
    pub fn new(geom: &TorusGeometry) -> Self {
        let (n, nc, m) = (geom.dim_state, geom.dim_control, geom.dim_noise);
        Self {
            b: vec![0.0; n],
            sigma: vec![0.0; n * m],
            d: vec![0.0; n * n],
            gub: vec![0.0; n * nc],
            gusig: vec![0.0; n * m * nc],
            gur: vec![0.0; nc],
            u_probe: vec![0.0; nc],
            grad_lo: vec![0.0; nc],
            grad_hi: vec![0.0; nc],
        }
    }
}

/// A stochastic control problem on the torus: coefficients, their
/// u-derivatives, and the declared regularity constants.
#[derive(Clone)]
pub struct ProblemSpec {
    pub geometry: TorusGeometry,
    pub name: String,
    pub drift: TensorFn,
    pub diffusion: TensorFn,
    pub running_cost: ScalarFn,
    pub terminal_cost: TerminalFn,
    pub grad_u_drift: TensorFn,
    pub grad_u_diffusion: TensorFn,
    pub grad_u_running_cost: TensorFn,
    /// Declared lower bound on the eigenvalues of `D = sigma sigma^T / 2`.
    pub sigma0: f64,
    /// Declared strong-concavity modulus of G in u; 0 means unknown.
    pub mu_g: f64,
    /// Declared coefficient bound (informational).
    pub bound_k: f64,
    /// Diagnostic box for controls: probes keep `|u_i| <= u_box`.
    pub u_box: f64,
}

impl ProblemSpec {
    fn check_dims(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.geometry.dim_state {
            return Err(Error::DimensionMismatch(format!(
                "point has {} coordinates, problem expects {}",
                x.len(),
                self.geometry.dim_state
            )));
        }
        if u.len() != self.geometry.dim_control {
            return Err(Error::DimensionMismatch(format!(
                "control has {} components, problem expects {}",
                u.len(),
                self.geometry.dim_control
            )));
        }
        Ok(())
    }

    pub fn scratch(&self) -> Scratch {
        Scratch::new(&self.geometry)
    }

    /// `D(t,x,u) = sigma sigma^T / 2`, written into `out` (n x n, symmetric).
    pub fn d_into(&self, t: f64, x: &[f64], u: &[f64], sigma_buf: &mut [f64], out: &mut [f64]) {
        let n = self.geometry.dim_state;
        let m = self.geometry.dim_noise;
        (self.diffusion)(t, x, u, sigma_buf);
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for k in 0..m {
                    acc += sigma_buf[i * m + k] * sigma_buf[j * m + k];
                }
                out[i * n + j] = 0.5 * acc;
                out[j * n + i] = 0.5 * acc;
            }
        }
    }

    /// `D = sigma sigma^T / 2` as a fresh matrix.
    pub fn eval_d(&self, t: f64, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(x, u)?;
        let n = self.geometry.dim_state;
        let mut sigma = vec![0.0; n * self.geometry.dim_noise];
        let mut d = vec![0.0; n * n];
        self.d_into(t, x, u, &mut sigma, &mut d);
        Ok(d)
    }

    /// Generalized Hamiltonian `G = Tr(P D) + <p, b> - r` with preallocated
    /// scratch; the hot-path variant used inside the solvers.
    pub fn eval_g_scratch(
        &self,
        t: f64,
        x: &[f64],
        u: &[f64],
        cs: &CoState,
        ws: &mut Scratch,
    ) -> Result<f64> {
        let n = self.geometry.dim_state;
        (self.drift)(t, x, u, &mut ws.b);
        self.d_into(t, x, u, &mut ws.sigma, &mut ws.d);
        let r = (self.running_cost)(t, x, u);
        let mut g = linalg::dot(&cs.p, &ws.b) - r;
        for i in 0..n {
            for j in 0..n {
                g += cs.big_p[i * n + j] * ws.d[i * n + j];
            }
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("G at t={t}, x={x:?}, u={u:?}")));
        }
        Ok(g)
    }

    /// Generalized Hamiltonian `G(t, x, u, p, P)`.
    pub fn eval_g(&self, t: f64, x: &[f64], u: &[f64], cs: &CoState) -> Result<f64> {
        self.check_dims(x, u)?;
        let mut ws = self.scratch();
        self.eval_g_scratch(t, x, u, cs, &mut ws)
    }

    /// First-order Hamiltonian `H = Tr(q^T sigma) + <p, b> - r`; kept for
    /// adjoint diagnostics.
    pub fn eval_h(&self, t: f64, x: &[f64], u: &[f64], p: &[f64], q: &[f64]) -> Result<f64> {
        self.check_dims(x, u)?;
        let n = self.geometry.dim_state;
        let m = self.geometry.dim_noise;
        if p.len() != n || q.len() != n * m {
            return Err(Error::DimensionMismatch("adjoint pair (p, q) has wrong shape".into()));
        }
        let mut ws = self.scratch();
        (self.drift)(t, x, u, &mut ws.b);
        (self.diffusion)(t, x, u, &mut ws.sigma);
        let mut h = linalg::dot(p, &ws.b) - (self.running_cost)(t, x, u);
        for i in 0..n {
            for k in 0..m {
                h += q[i * m + k] * ws.sigma[i * m + k];
            }
        }
        if !h.is_finite() {
            return Err(Error::Numeric(format!("H at t={t}, x={x:?}, u={u:?}")));
        }
        Ok(h)
    }

    /// `grad_u G` into `out`: contraction of `P` against `grad_u D`
    /// (assembled from `grad_u sigma` by the product rule) plus
    /// `(grad_u b)^T p - grad_u r`.
    pub fn grad_u_g_scratch(
        &self,
        t: f64,
        x: &[f64],
        u: &[f64],
        cs: &CoState,
        ws: &mut Scratch,
        out: &mut [f64],
    ) -> Result<()> {
        let n = self.geometry.dim_state;
        let m = self.geometry.dim_noise;
        let nc = self.geometry.dim_control;
        (self.diffusion)(t, x, u, &mut ws.sigma);
        (self.grad_u_drift)(t, x, u, &mut ws.gub);
        (self.grad_u_diffusion)(t, x, u, &mut ws.gusig);
        (self.grad_u_running_cost)(t, x, u, &mut ws.gur);
        for c in 0..nc {
            let mut acc = -ws.gur[c];
            for i in 0..n {
                acc += cs.p[i] * ws.gub[i * nc + c];
            }
            // d_c D_ij = (d_c sigma_ik sigma_jk + sigma_ik d_c sigma_jk) / 2
            for i in 0..n {
                for j in 0..n {
                    let mut dd = 0.0;
                    for k in 0..m {
                        dd += ws.gusig[(i * m + k) * nc + c] * ws.sigma[j * m + k]
                            + ws.sigma[i * m + k] * ws.gusig[(j * m + k) * nc + c];
                    }
                    acc += cs.big_p[i * n + j] * 0.5 * dd;
                }
            }
            if !acc.is_finite() {
                return Err(Error::Numeric(format!("grad_u G at t={t}, x={x:?}, u={u:?}")));
            }
            out[c] = acc;
        }
        Ok(())
    }

    pub fn grad_u_g(&self, t: f64, x: &[f64], u: &[f64], cs: &CoState) -> Result<Vec<f64>> {
        self.check_dims(x, u)?;
        let mut ws = self.scratch();
        let mut out = vec![0.0; self.geometry.dim_control];
        self.grad_u_g_scratch(t, x, u, cs, &mut ws, &mut out)?;
        Ok(out)
    }

    /// Hessian of G in u by central differences of the analytic gradient
    /// (step 1e-4), symmetrized. Second derivatives appear only in the inner
    /// Newton solve and in diagnostics, where this accuracy suffices.
    pub fn hess_u_g_scratch(
        &self,
        t: f64,
        x: &[f64],
        u: &[f64],
        cs: &CoState,
        ws: &mut Scratch,
        out: &mut [f64],
    ) -> Result<()> {
        let nc = self.geometry.dim_control;
        const STEP: f64 = 1e-4;
        let mut raw = vec![0.0; nc * nc];
        for c in 0..nc {
            ws.u_probe.copy_from_slice(u);
            ws.u_probe[c] = u[c] + STEP;
            let mut hi = std::mem::take(&mut ws.grad_hi);
            let mut lo = std::mem::take(&mut ws.grad_lo);
            self.grad_u_g_scratch(t, x, &ws.u_probe.clone(), cs, ws, &mut hi)?;
            ws.u_probe[c] = u[c] - STEP;
            self.grad_u_g_scratch(t, x, &ws.u_probe.clone(), cs, ws, &mut lo)?;
            for r in 0..nc {
                raw[r * nc + c] = (hi[r] - lo[r]) / (2.0 * STEP);
            }
            ws.grad_hi = hi;
            ws.grad_lo = lo;
        }
        for i in 0..nc {
            for j in 0..nc {
                let v = 0.5 * (raw[i * nc + j] + raw[j * nc + i]);
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("hess_u G at t={t}, x={x:?}, u={u:?}")));
                }
                out[i * nc + j] = v;
            }
        }
        Ok(())
    }

    pub fn hess_u_g(&self, t: f64, x: &[f64], u: &[f64], cs: &CoState) -> Result<Vec<f64>> {
        self.check_dims(x, u)?;
        let mut ws = self.scratch();
        let nc = self.geometry.dim_control;
        let mut out = vec![0.0; nc * nc];
        self.hess_u_g_scratch(t, x, u, cs, &mut ws, &mut out)?;
        Ok(out)
    }

    // -- declared-constant spot checks -------------------------------------

    /// Verify `D` is symmetric positive definite with eigenvalues above the
    /// declared `sigma0` at seeded random probe points inside the u-box.
    pub fn check_ellipticity(&self, n_probes: usize, seed: u64) -> Result<f64> {
        let rng = CounterRng::new(seed);
        let n = self.geometry.dim_state;
        let mut worst = f64::INFINITY;
        for i in 0..n_probes as u64 {
            let (t, x, u) = self.random_probe(&rng, i);
            let d = self.eval_d(t, &x, &u)?;
            let ev = linalg::sym_eigenvalues(&d, n);
            worst = worst.min(ev[0]);
            if ev[0] < self.sigma0 - 1e-12 {
                return Err(Error::Numeric(format!(
                    "ellipticity violated: lambda_min = {} < sigma0 = {} at probe {i}",
                    ev[0], self.sigma0
                )));
            }
        }
        Ok(worst)
    }

    /// Verify the analytic u-gradient of G against central finite differences
    /// of `eval_g` at seeded random probes. Returns the worst relative error.
    pub fn check_grad_consistency(&self, n_probes: usize, seed: u64) -> Result<f64> {
        let rng = CounterRng::new(seed);
        let nc = self.geometry.dim_control;
        let n = self.geometry.dim_state;
        let mut worst = 0.0f64;
        const EPS: f64 = 1e-5;
        for i in 0..n_probes as u64 {
            let (t, x, u) = self.random_probe(&rng, i);
            let mut cs = CoState::zero(n);
            for k in 0..n {
                cs.p[k] = rng.uniform_in(-2.0, 2.0, purpose::PROBE, i, 40 + k as u64, 0);
            }
            for r in 0..n {
                for c in r..n {
                    let v =
                        rng.uniform_in(-1.0, 1.0, purpose::PROBE, i, 60 + (r * n + c) as u64, 0);
                    cs.big_p[r * n + c] = v;
                    cs.big_p[c * n + r] = v;
                }
            }
            let analytic = self.grad_u_g(t, &x, &u, &cs)?;
            for c in 0..nc {
                let mut up = u.clone();
                up[c] += EPS;
                let mut dn = u.clone();
                dn[c] -= EPS;
                let fd = (self.eval_g(t, &x, &up, &cs)? - self.eval_g(t, &x, &dn, &cs)?)
                    / (2.0 * EPS);
                let scale = analytic[c].abs().max(fd.abs()).max(1.0);
                worst = worst.max((analytic[c] - fd).abs() / scale);
            }
        }
        Ok(worst)
    }

    /// For problems declaring `mu_g > 0`: check the largest eigenvalue of
    /// `hess_u G` stays below `-mu_g` (plus slack) at seeded random probes.
    pub fn check_concavity(&self, n_probes: usize, seed: u64) -> Result<f64> {
        if self.mu_g <= 0.0 {
            return Err(Error::InvalidArgument("problem declares no mu_g".into()));
        }
        let rng = CounterRng::new(seed);
        let n = self.geometry.dim_state;
        let nc = self.geometry.dim_control;
        let mut worst = f64::NEG_INFINITY;
        for i in 0..n_probes as u64 {
            let (t, x, u) = self.random_probe(&rng, i);
            let mut cs = CoState::zero(n);
            for k in 0..n {
                cs.p[k] = rng.uniform_in(-2.0, 2.0, purpose::PROBE, i, 40 + k as u64, 0);
            }
            let h = self.hess_u_g(t, &x, &u, &cs)?;
            let ev = linalg::sym_eigenvalues(&h, nc);
            let top = ev[nc - 1];
            worst = worst.max(top);
            if top > -self.mu_g + 1e-6 {
                return Err(Error::Numeric(format!(
                    "concavity violated: max eig = {top} > -mu_g = {} at probe {i}",
                    -self.mu_g
                )));
            }
        }
        Ok(worst)
    }

    fn random_probe(&self, rng: &CounterRng, i: u64) -> (f64, Vec<f64>, Vec<f64>) {
        let t = rng.uniform(purpose::PROBE, i, 0, 0);
        let x: Vec<f64> = (0..self.geometry.dim_state)
            .map(|a| rng.uniform(purpose::PROBE, i, 1 + a as u64, 0))
            .collect();
        let u: Vec<f64> = (0..self.geometry.dim_control)
            .map(|c| rng.uniform_in(-self.u_box, self.u_box, purpose::PROBE, i, 20 + c as u64, 0))
            .collect();
        (t, x, u)
    }
}

/// Convenience constructors for coefficient callbacks that ignore time, the
/// common case: most coefficients do not depend on time.
pub fn scalar_fn(f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> ScalarFn {
    Arc::new(move |_t, x, u| f(x, u))
}

pub fn tensor_fn(f: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> TensorFn {
    Arc::new(move |_t, x, u, out| f(x, u, out))
}
