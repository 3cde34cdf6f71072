//! GP motion priors generated by SDEs driven by white noise.
//!
//! Each prior is represented in lifted form: per-interval transition matrices
//! Phi(t_n, t_{n-1}), process-noise blocks Q_n and their inverses, exogenous
//! integrals v_n, and the propagated mean. The assembled inverse kernel
//! matrix F^{-T} Q^{-1} F^{-1} is exactly block-tridiagonal, which every
//! downstream solve relies on.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocklin::BlockTridiagonalSystem;

pub const POSE_DIM: usize = 3;
pub const STATE_DIM: usize = 6;

pub type Mat6 = Matrix6<f64>;
pub type Vec6 = Vector6<f64>;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("negative interval: t = {t} < s = {s}")]
    NegativeInterval { t: f64, s: f64 },
    #[error("degenerate interval of length {0}")]
    DegenerateInterval(f64),
    #[error("knot times must be strictly increasing (index {0})")]
    NonMonotonicTimes(usize),
    #[error("noise block not invertible over [{0}, {1}]")]
    SingularNoiseBlock(f64, f64),
}

/// Which SDE generates the prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorKind {
    /// White noise on inertial acceleration: state [pose; pose rate].
    LtiConstVel,
    /// White noise on body-frame acceleration: state [pose; body velocity].
    NtvBodyConstVel,
    /// Matern-3/2 position prior realized as a second-order SDE.
    Matern32 { sigma: f64, ell: f64 },
}

impl PriorKind {
    pub fn is_nonlinear(&self) -> bool {
        matches!(self, PriorKind::NtvBodyConstVel)
    }
}

/// Prior kind plus the diagonal power-spectral density of the driving noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorModel {
    pub kind: PriorKind,
    /// Diagonal entries of Q_C (one per velocity component).
    pub qc: Vector3<f64>,
}

impl PriorModel {
    pub fn new(kind: PriorKind, qc: Vector3<f64>) -> Self {
        assert!(qc.iter().all(|&q| q > 0.0), "Q_C entries must be positive");
        Self { kind, qc }
    }

    /// Matern-3/2 prior with its Q_C fixed by (sigma, ell): 4 sigma^2 lambda^3
    /// with lambda = sqrt(3) / ell.
    pub fn matern32(sigma: f64, ell: f64) -> Self {
        assert!(sigma > 0.0 && ell > 0.0);
        let lambda = 3f64.sqrt() / ell;
        let q = 4.0 * sigma * sigma * lambda.powi(3);
        Self { kind: PriorKind::Matern32 { sigma, ell }, qc: Vector3::repeat(q) }
    }

    fn matern_lambda(&self) -> f64 {
        match self.kind {
            PriorKind::Matern32 { ell, .. } => 3f64.sqrt() / ell,
            _ => unreachable!(),
        }
    }
}

/// Analytic Matern covariance for nu = 3/2; test oracle for the SDE route.
pub fn matern_kernel_value(sigma: f64, ell: f64, tau_lag: f64) -> f64 {
    let a = 3f64.sqrt() * tau_lag.abs() / ell;
    sigma * sigma * (1.0 + a) * (-a).exp()
}

/// Fixed-step integration controls for the numerically integrated priors.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IntegrationConfig {
    /// Upper bound on the RK4 / trapezoid step, seconds.
    pub max_step: f64,
    /// Minimum number of substeps per knot interval.
    pub min_substeps: usize,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self { max_step: 0.05, min_substeps: 20 }
    }
}

impl IntegrationConfig {
    fn substeps(&self, dt: f64) -> usize {
        let by_step = (dt / self.max_step).ceil() as usize;
        by_step.max(self.min_substeps).max(1)
    }
}

/// Operating trajectory used to linearize a nonlinear SDE.
///
/// `DeadReckon` integrates the nonlinear dynamics forward from the nearest
/// knot at or before the requested time, which realizes the
/// previous-iteration interpolant for within-interval evaluation.
#[derive(Debug, Clone)]
pub enum OpTrajectory {
    /// Fixed operating state for all times.
    Constant(Vec6),
    /// Knot states of the previous iterate; between knots the state follows
    /// the nonlinear dynamics integrated from the left knot.
    DeadReckon { times: Vec<f64>, knots: Vec<Vec6> },
}

impl OpTrajectory {
    pub fn state_at(&self, t: f64) -> Vec6 {
        match self {
            OpTrajectory::Constant(x) => *x,
            OpTrajectory::DeadReckon { times, knots } => {
                let n = left_knot(times, t);
                integrate_body_dynamics(knots[n], t - times[n])
            }
        }
    }

    /// Samples the operating state on a uniform grid over [t0, t1]
    /// (inclusive); one sequential integration instead of per-point restarts.
    fn sample_grid(&self, t0: f64, t1: f64, n_steps: usize) -> Vec<Vec6> {
        match self {
            OpTrajectory::Constant(x) => vec![*x; n_steps + 1],
            OpTrajectory::DeadReckon { times, knots } => {
                let n = left_knot(times, t0);
                let h = (t1 - t0) / n_steps as f64;
                let mut x = integrate_body_dynamics(knots[n], t0 - times[n]);
                let mut out = Vec::with_capacity(n_steps + 1);
                out.push(x);
                for _ in 0..n_steps {
                    x = rk4_body(x, h);
                    out.push(x);
                }
                out
            }
        }
    }
}

fn left_knot(times: &[f64], t: f64) -> usize {
    match times.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
        Ok(i) => i,
        Err(0) => 0,
        Err(i) => (i - 1).min(times.len() - 1),
    }
}

/// Body-frame constant-velocity dynamics: pdot = R(theta) nu, nudot = w.
pub fn body_dynamics(x: &Vec6) -> Vec6 {
    let theta = x[2];
    let (s, c) = theta.sin_cos();
    let (v, u, w) = (x[3], x[4], x[5]);
    Vector6::new(c * v - s * u, s * v + c * u, w, 0.0, 0.0, 0.0)
}

/// Jacobian of `body_dynamics` with respect to the state.
pub fn body_dynamics_jacobian(x: &Vec6) -> Mat6 {
    let theta = x[2];
    let (s, c) = theta.sin_cos();
    let (v, u) = (x[3], x[4]);
    let mut f = Mat6::zeros();
    // d(pdot)/d(theta)
    f[(0, 2)] = -s * v - c * u;
    f[(1, 2)] = c * v - s * u;
    // d(pdot)/d(nu) = R(theta)
    f[(0, 3)] = c;
    f[(0, 4)] = -s;
    f[(1, 3)] = s;
    f[(1, 4)] = c;
    f[(2, 5)] = 1.0;
    f
}

fn rk4_body(x: Vec6, h: f64) -> Vec6 {
    let k1 = body_dynamics(&x);
    let k2 = body_dynamics(&(x + k1 * (h / 2.0)));
    let k3 = body_dynamics(&(x + k2 * (h / 2.0)));
    let k4 = body_dynamics(&(x + k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

pub fn integrate_body_dynamics(x0: Vec6, dt: f64) -> Vec6 {
    if dt.abs() < 1e-12 {
        return x0;
    }
    let n = ((dt.abs() / 0.05).ceil() as usize).max(1);
    let h = dt / n as f64;
    let mut x = x0;
    for _ in 0..n {
        x = rk4_body(x, h);
    }
    x
}

/// First-knot handling: either a Gaussian prior on the initial state, or the
/// initial state locked to zero and eliminated from the solve.
#[derive(Debug, Clone)]
pub enum FirstKnot {
    Free { x0: Vec6, p0: Mat6 },
    Locked,
}

impl FirstKnot {
    pub fn is_locked(&self) -> bool {
        matches!(self, FirstKnot::Locked)
    }

    pub fn mean(&self) -> Vec6 {
        match self {
            FirstKnot::Free { x0, .. } => *x0,
            FirstKnot::Locked => Vec6::zeros(),
        }
    }

    pub(crate) fn cov(&self) -> Mat6 {
        match self {
            FirstKnot::Free { p0, .. } => *p0,
            FirstKnot::Locked => Mat6::zeros(),
        }
    }
}

/// Transition matrix Phi(t, s) of the (linearized) SDE.
pub fn transition(
    model: &PriorModel,
    op: &OpTrajectory,
    t: f64,
    s: f64,
    integ: &IntegrationConfig,
) -> Result<Mat6, PriorError> {
    if t < s {
        return Err(PriorError::NegativeInterval { t, s });
    }
    let dt = t - s;
    match model.kind {
        PriorKind::LtiConstVel => Ok(lti_transition(dt)),
        PriorKind::Matern32 { .. } => Ok(matern_transition(model.matern_lambda(), dt)),
        PriorKind::NtvBodyConstVel => {
            if dt == 0.0 {
                return Ok(Mat6::identity());
            }
            let n = integ.substeps(dt);
            let grid = op.sample_grid(s, t, 2 * n); // half-step samples for RK4
            let h = dt / n as f64;
            let mut upsilon = Mat6::identity();
            for i in 0..n {
                let f0 = body_dynamics_jacobian(&grid[2 * i]);
                let fm = body_dynamics_jacobian(&grid[2 * i + 1]);
                let f1 = body_dynamics_jacobian(&grid[2 * i + 2]);
                upsilon = rk4_matrix(&upsilon, &f0, &fm, &f1, h);
            }
            Ok(upsilon)
        }
    }
}

fn lti_transition(dt: f64) -> Mat6 {
    let mut phi = Mat6::identity();
    for i in 0..POSE_DIM {
        phi[(i, i + POSE_DIM)] = dt;
    }
    phi
}

/// Per-dimension 2x2 matrix exponential of [[0, 1], [-lambda^2, -2 lambda]].
fn matern_transition(lambda: f64, dt: f64) -> Mat6 {
    let e = (-lambda * dt).exp();
    let a00 = e * (1.0 + lambda * dt);
    let a01 = e * dt;
    let a10 = -e * lambda * lambda * dt;
    let a11 = e * (1.0 - lambda * dt);
    let mut phi = Mat6::zeros();
    for i in 0..POSE_DIM {
        phi[(i, i)] = a00;
        phi[(i, i + POSE_DIM)] = a01;
        phi[(i + POSE_DIM, i)] = a10;
        phi[(i + POSE_DIM, i + POSE_DIM)] = a11;
    }
    phi
}

/// One RK4 step of Upsilon' = F(t) Upsilon with F sampled at the step
/// endpoints and midpoint.
fn rk4_matrix(y: &Mat6, f0: &Mat6, fm: &Mat6, f1: &Mat6, h: f64) -> Mat6 {
    let k1 = f0 * y;
    let k2 = fm * (y + k1 * (h / 2.0));
    let k3 = fm * (y + k2 * (h / 2.0));
    let k4 = f1 * (y + k3 * h);
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Process-noise block over [t_prev, t_next] and its inverse.
pub fn noise_block(
    model: &PriorModel,
    op: &OpTrajectory,
    t_prev: f64,
    t_next: f64,
    integ: &IntegrationConfig,
) -> Result<(Mat6, Mat6), PriorError> {
    let q = noise_block_weighted(model, op, t_prev, t_next, &Matrix3::from_diagonal(&model.qc), integ)?;
    let qinv = invert_spd6(&q).ok_or(PriorError::SingularNoiseBlock(t_prev, t_next))?;
    Ok((q, qinv))
}

/// Q accumulated over [t_prev, t_next] with an arbitrary (symmetric) weight in
/// place of Q_C; used both for the noise blocks themselves and for their
/// partial derivatives with respect to Q_C entries.
pub fn noise_block_weighted(
    model: &PriorModel,
    op: &OpTrajectory,
    t_prev: f64,
    t_next: f64,
    weight: &Matrix3<f64>,
    integ: &IntegrationConfig,
) -> Result<Mat6, PriorError> {
    let dt = t_next - t_prev;
    if dt < 1e-9 {
        return Err(PriorError::DegenerateInterval(dt));
    }
    match model.kind {
        PriorKind::LtiConstVel => Ok(lti_noise(dt, weight)),
        PriorKind::Matern32 { .. } => {
            let lambda = model.matern_lambda();
            let n = integ.substeps(dt);
            let h = dt / n as f64;
            let lql = lift_weight(weight);
            let g = |s: f64| {
                let phi = matern_transition(lambda, t_next - s);
                phi * lql * phi.transpose()
            };
            // Composite Simpson (exact on the polynomial integrands of the
            // constant-F case; O(h^4) otherwise).
            let mut q = Mat6::zeros();
            for k in 0..n {
                let s0 = t_prev + k as f64 * h;
                q += (g(s0) + g(s0 + 0.5 * h) * 4.0 + g(s0 + h)) * (h / 6.0);
            }
            Ok(q)
        }
        PriorKind::NtvBodyConstVel => {
            let n = integ.substeps(dt);
            let h = dt / n as f64;
            let upsilons = upsilon_half_grid(op, t_prev, t_next, n)?;
            let upsilon_end = upsilons[2 * n];
            let lql = lift_weight(weight);
            let g = |k: usize| -> Result<Mat6, PriorError> {
                let phi = upsilon_end
                    * upsilons[k]
                        .try_inverse()
                        .ok_or(PriorError::SingularNoiseBlock(t_prev, t_next))?;
                Ok(phi * lql * phi.transpose())
            };
            let mut q = Mat6::zeros();
            for k in 0..n {
                q += (g(2 * k)? + g(2 * k + 1)? * 4.0 + g(2 * k + 2)?) * (h / 6.0);
            }
            Ok(q)
        }
    }
}

fn lti_noise(dt: f64, weight: &Matrix3<f64>) -> Mat6 {
    let mut q = Mat6::zeros();
    let dt2 = dt * dt;
    let dt3 = dt2 * dt;
    for i in 0..POSE_DIM {
        for j in 0..POSE_DIM {
            let w = weight[(i, j)];
            q[(i, j)] = dt3 / 3.0 * w;
            q[(i, j + POSE_DIM)] = dt2 / 2.0 * w;
            q[(i + POSE_DIM, j)] = dt2 / 2.0 * w;
            q[(i + POSE_DIM, j + POSE_DIM)] = dt * w;
        }
    }
    q
}

/// Closed-form inverse of the LTI noise block for diagonal Q_C.
pub fn lti_noise_inverse(dt: f64, qc: &Vector3<f64>) -> Mat6 {
    let mut qinv = Mat6::zeros();
    for i in 0..POSE_DIM {
        let qi = 1.0 / qc[i];
        qinv[(i, i)] = 12.0 * qi / dt.powi(3);
        qinv[(i, i + POSE_DIM)] = -6.0 * qi / dt.powi(2);
        qinv[(i + POSE_DIM, i)] = -6.0 * qi / dt.powi(2);
        qinv[(i + POSE_DIM, i + POSE_DIM)] = 4.0 * qi / dt;
    }
    qinv
}

fn lift_weight(weight: &Matrix3<f64>) -> Mat6 {
    let mut lql = Mat6::zeros();
    for i in 0..POSE_DIM {
        for j in 0..POSE_DIM {
            lql[(i + POSE_DIM, j + POSE_DIM)] = weight[(i, j)];
        }
    }
    lql
}

/// Upsilon relative to t_prev at half-step resolution: 2n + 1 values over n
/// intervals, integrated with RK4 at step h/2 on a quarter-step state grid.
fn upsilon_half_grid(
    op: &OpTrajectory,
    t_prev: f64,
    t_next: f64,
    n: usize,
) -> Result<Vec<Mat6>, PriorError> {
    let h = (t_next - t_prev) / n as f64;
    let grid = op.sample_grid(t_prev, t_next, 4 * n);
    let mut upsilons = Vec::with_capacity(2 * n + 1);
    let mut upsilon = Mat6::identity();
    upsilons.push(upsilon);
    for i in 0..2 * n {
        let f0 = body_dynamics_jacobian(&grid[2 * i]);
        let fm = body_dynamics_jacobian(&grid[2 * i + 1]);
        let f1 = body_dynamics_jacobian(&grid[2 * i + 2]);
        upsilon = rk4_matrix(&upsilon, &f0, &fm, &f1, 0.5 * h);
        upsilons.push(upsilon);
    }
    Ok(upsilons)
}

fn invert_spd6(m: &Mat6) -> Option<Mat6> {
    let sym = (m + m.transpose()) * 0.5;
    nalgebra::Cholesky::new(sym).map(|c| c.inverse())
}

/// The {Phi_n}, {Q_n, Q_n^{-1}}, {v_n}, mean and first-knot data encoding the
/// prior in lifted form; everything downstream (assembly, interpolation,
/// training) reads from this.
#[derive(Debug, Clone)]
pub struct PriorFactorization {
    pub times: Vec<f64>,
    /// trans[i] = Phi(t_{i+1}, t_i).
    pub trans: Vec<Mat6>,
    pub q: Vec<Mat6>,
    pub qinv: Vec<Mat6>,
    /// Exogenous integral v_{i+1} over interval i (zero for the linear
    /// priors with no input).
    pub exog: Vec<Vec6>,
    /// Prior mean at each knot.
    pub mean: Vec<Vec6>,
    /// Prior covariance at each knot (zero at a locked first knot).
    pub knot_cov: Vec<Mat6>,
    pub first: FirstKnot,
    pub model: PriorModel,
    /// Normalized fundamental matrix at each knot (nonlinear priors only).
    pub upsilon: Vec<Mat6>,
    /// Operating trajectory the prior was linearized about.
    pub op: OpTrajectory,
    pub integ: IntegrationConfig,
}

/// Builds the lifted prior over the given knot times.
///
/// For the nonlinear prior, `op` supplies the operating trajectory (the
/// previous Gauss-Newton iterate); linear priors ignore it.
pub fn build_prior(
    model: &PriorModel,
    times: &[f64],
    op: &OpTrajectory,
    first: FirstKnot,
    integ: &IntegrationConfig,
) -> Result<PriorFactorization, PriorError> {
    assert!(!times.is_empty());
    for i in 1..times.len() {
        if times[i] <= times[i - 1] {
            return Err(PriorError::NonMonotonicTimes(i));
        }
    }
    let n_int = times.len() - 1;
    let mut trans = Vec::with_capacity(n_int);
    let mut q = Vec::with_capacity(n_int);
    let mut qinv = Vec::with_capacity(n_int);
    let mut exog = Vec::with_capacity(n_int);
    let mut mean = Vec::with_capacity(times.len());
    let mut knot_cov = Vec::with_capacity(times.len());
    let mut upsilon = Vec::new();
    let nonlinear = model.kind.is_nonlinear();
    if nonlinear {
        upsilon.push(Mat6::identity());
    }
    mean.push(first.mean());
    knot_cov.push(first.cov());
    for i in 0..n_int {
        let (t0, t1) = (times[i], times[i + 1]);
        let phi = transition(model, op, t1, t0, integ)?;
        let (qi, qiv) = match model.kind {
            PriorKind::LtiConstVel => {
                let dt = t1 - t0;
                if dt < 1e-9 {
                    return Err(PriorError::DegenerateInterval(dt));
                }
                (lti_noise(dt, &Matrix3::from_diagonal(&model.qc)), lti_noise_inverse(dt, &model.qc))
            }
            _ => noise_block(model, op, t0, t1, integ)?,
        };
        let v = if nonlinear {
            exogenous_integral(op, t0, t1, integ)?
        } else {
            Vec6::zeros()
        };
        let next_mean = phi * mean[i] + v;
        let next_cov = phi * knot_cov[i] * phi.transpose() + qi;
        mean.push(next_mean);
        knot_cov.push(next_cov);
        if nonlinear {
            let up = phi * upsilon[i];
            upsilon.push(up);
        }
        trans.push(phi);
        q.push(qi);
        qinv.push(qiv);
        exog.push(v);
    }
    Ok(PriorFactorization {
        times: times.to_vec(),
        trans,
        q,
        qinv,
        exog,
        mean,
        knot_cov,
        first,
        model: model.clone(),
        upsilon,
        op: op.clone(),
        integ: *integ,
    })
}

/// v_n = integral of Phi(t1, s) v(s) ds with v(s) = f(x_op) - F x_op.
fn exogenous_integral(
    op: &OpTrajectory,
    t0: f64,
    t1: f64,
    integ: &IntegrationConfig,
) -> Result<Vec6, PriorError> {
    let n = integ.substeps(t1 - t0);
    let h = (t1 - t0) / n as f64;
    let grid = op.sample_grid(t0, t1, 4 * n);
    let upsilons = upsilon_half_grid(op, t0, t1, n)?;
    let upsilon_end = upsilons[2 * n];
    let g = |k: usize| -> Result<Vec6, PriorError> {
        let x = grid[2 * k];
        let vs = body_dynamics(&x) - body_dynamics_jacobian(&x) * x;
        let phi = upsilon_end
            * upsilons[k]
                .try_inverse()
                .ok_or(PriorError::SingularNoiseBlock(t0, t1))?;
        Ok(phi * vs)
    };
    let mut v = Vec6::zeros();
    for k in 0..n {
        v += (g(2 * k)? + g(2 * k + 1)? * 4.0 + g(2 * k + 2)?) * (h / 6.0);
    }
    Ok(v)
}

impl PriorFactorization {
    pub fn n_knots(&self) -> usize {
        self.times.len()
    }

    /// Index of the interval containing tau, by binary search; `None` when
    /// tau lies past the final knot.
    pub fn interval_of(&self, tau: f64) -> Option<usize> {
        let last = *self.times.last().unwrap();
        if tau >= last {
            return None;
        }
        Some(left_knot(&self.times, tau).min(self.times.len() - 2))
    }

    /// Assembled inverse kernel matrix P^{-1} = F^{-T} Q^{-1} F^{-1} over all
    /// knots; requires a free first knot (P_0 enters as the leading Q block).
    pub fn precision_system(&self) -> BlockTridiagonalSystem {
        assert!(!self.first.is_locked(), "locked first knot has no P0 block");
        let p0 = self.first.cov();
        let p0inv = invert_spd6(&p0).expect("P0 must be positive definite");
        let n = self.n_knots();
        let mut sys = BlockTridiagonalSystem::zeros(STATE_DIM, n);
        sys.add_to_diag(0, &dmat(&p0inv));
        for i in 0..n - 1 {
            let phi = &self.trans[i];
            let qiv = &self.qinv[i];
            sys.add_to_diag(i, &dmat(&(phi.transpose() * qiv * phi)));
            sys.add_to_diag(i + 1, &dmat(qiv));
            sys.add_to_offdiag(i, &dmat(&(-qiv * phi)));
        }
        sys
    }

    /// Dense kernel matrix P assembled pairwise from the covariance function;
    /// the independent route used by sparsity checks (small N only).
    pub fn dense_kernel(&self) -> DMatrix<f64> {
        let n = self.n_knots();
        let bd = STATE_DIM;
        // Accumulated covariance at each knot is already in knot_cov.
        let mut p = DMatrix::zeros(n * bd, n * bd);
        for i in 0..n {
            for j in 0..n {
                let blk: Mat6 = if i == j {
                    self.knot_cov[i]
                } else if i < j {
                    self.knot_cov[i] * self.phi_between(i, j).transpose()
                } else {
                    self.phi_between(j, i) * self.knot_cov[j]
                };
                p.view_mut((i * bd, j * bd), (bd, bd)).copy_from(&dmat(&blk));
            }
        }
        p
    }

    /// Phi(t_j, t_i) for knot indices i <= j, by chaining interval factors.
    pub fn phi_between(&self, i: usize, j: usize) -> Mat6 {
        assert!(i <= j);
        let mut phi = Mat6::identity();
        for k in i..j {
            phi = self.trans[k] * phi;
        }
        phi
    }

    /// Prior mean at an arbitrary time at or after t0.
    pub fn mean_at(&self, tau: f64) -> Result<Vec6, PriorError> {
        let t0 = self.times[0];
        if tau < t0 {
            return Err(PriorError::NegativeInterval { t: tau, s: t0 });
        }
        let (n, base) = match self.interval_of(tau) {
            Some(n) => (n, self.times[n]),
            None => (self.n_knots() - 1, *self.times.last().unwrap()),
        };
        let phi = transition(&self.model, &self.op, tau, base, &self.integ)?;
        let v = if self.model.kind.is_nonlinear() && tau > base {
            exogenous_integral(&self.op, base, tau, &self.integ)?
        } else {
            Vec6::zeros()
        };
        Ok(phi * self.mean[n] + v)
    }
}

pub(crate) fn dmat(m: &Mat6) -> DMatrix<f64> {
    DMatrix::from_fn(STATE_DIM, STATE_DIM, |i, j| m[(i, j)])
}

pub(crate) fn dvec(v: &Vec6) -> DVector<f64> {
    DVector::from_fn(STATE_DIM, |i, _| v[i])
}
