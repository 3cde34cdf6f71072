//! Hyperparameter estimation for the process-noise spectral density.
//!
//! Maximizes the log marginal likelihood of ground-truth state observations
//! over the diagonal of Q_C, working entirely through the sparse inverse
//! kernel: the quadratic term and its gradient cost O(W), the exact trace
//! term uses the tridiagonal partial inverse, and an
//! observation-noise-free mode gives the cheapest gradients at the price of
//! an underconfident prior.

use nalgebra::{DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocklin::BlocklinError;
use crate::priors::{
    build_prior, dvec, noise_block_weighted, FirstKnot, IntegrationConfig, Mat6, OpTrajectory,
    PriorError, PriorFactorization, PriorKind, PriorModel, Vec6, POSE_DIM, STATE_DIM,
};

#[derive(Debug, Error)]
pub enum HypertrainError {
    #[error("training requires at least two observations, got {0}")]
    TooFewObservations(usize),
    #[error("observation noise variance must be non-negative, got {0}")]
    NegativeObsNoise(f64),
    #[error("process-noise block not positive definite (Q_C out of range)")]
    IndefiniteNoiseBlock,
    #[error("gradient norm {grad_norm:.3e} above tolerance after {iters} iterations")]
    NotConverged { grad_norm: f64, iters: usize, best: Box<TrainResult> },
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Blocklin(#[from] BlocklinError),
}

/// Ground-truth state observations y_w at times t_w with isotropic additive
/// noise variance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingSet {
    pub times: Vec<f64>,
    pub states: Vec<Vec6>,
    pub obs_var: f64,
}

impl TrainingSet {
    /// Sorts by time; the objective is invariant to input record order.
    pub fn new(
        mut times: Vec<f64>,
        mut states: Vec<Vec6>,
        obs_var: f64,
    ) -> Result<Self, HypertrainError> {
        if times.len() < 2 || times.len() != states.len() {
            return Err(HypertrainError::TooFewObservations(times.len()));
        }
        if obs_var < 0.0 {
            return Err(HypertrainError::NegativeObsNoise(obs_var));
        }
        let mut idx: Vec<usize> = (0..times.len()).collect();
        idx.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap());
        times = idx.iter().map(|&i| times[i]).collect();
        states = idx.iter().map(|&i| states[i]).collect();
        Ok(Self { times, states, obs_var })
    }

    /// Builds full-state observations from pose-only ground truth by central
    /// finite differences (one-sided at the ends). For the body-velocity
    /// state the differenced world rates are rotated into the body frame.
    pub fn from_pose_truth(
        times: Vec<f64>,
        poses: Vec<Vector3<f64>>,
        kind: &PriorKind,
        obs_var: f64,
    ) -> Result<Self, HypertrainError> {
        if times.len() < 2 || times.len() != poses.len() {
            return Err(HypertrainError::TooFewObservations(times.len()));
        }
        let w = times.len();
        let mut states = Vec::with_capacity(w);
        for i in 0..w {
            let (a, b) = if i == 0 {
                (0, 1)
            } else if i + 1 == w {
                (w - 2, w - 1)
            } else {
                (i - 1, i + 1)
            };
            let dt = times[b] - times[a];
            let mut rate = (poses[b] - poses[a]) / dt;
            if matches!(kind, PriorKind::NtvBodyConstVel) {
                let (s, c) = poses[i].z.sin_cos();
                let (vx, vy) = (rate.x, rate.y);
                rate.x = c * vx + s * vy;
                rate.y = -s * vx + c * vy;
            }
            states.push(Vec6::new(
                poses[i].x, poses[i].y, poses[i].z, rate.x, rate.y, rate.z,
            ));
        }
        Self::new(times, states, obs_var)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Exact gradients keep the additive observation noise in P_w; the fast mode
/// drops it, which biases fitted Q_C upward (underconfident prior).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Exact,
    IgnoreObsNoise,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub max_iters: usize,
    /// Convergence on the infinity norm of the log-space gradient.
    pub grad_tol: f64,
    /// Initial ascent step in log space; halved until improvement.
    pub init_step: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { mode: TrainMode::Exact, max_iters: 200, grad_tol: 1e-4, init_step: 0.1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainResult {
    pub qc: Vector3<f64>,
    pub mode: TrainMode,
    pub iterations: usize,
    pub final_lml: f64,
    /// (log-diagonal Q_C, objective) per accepted iterate.
    pub trace: Vec<(Vector3<f64>, f64)>,
}

fn training_prior(
    model: &PriorModel,
    ts: &TrainingSet,
) -> Result<PriorFactorization, HypertrainError> {
    // First knot anchored on the first observation with unit covariance;
    // P_0 is fixed, not trained.
    let op = if model.kind.is_nonlinear() {
        OpTrajectory::DeadReckon { times: ts.times.clone(), knots: ts.states.clone() }
    } else {
        OpTrajectory::Constant(Vec6::zeros())
    };
    Ok(build_prior(
        model,
        &ts.times,
        &op,
        FirstKnot::Free { x0: ts.states[0], p0: Mat6::identity() },
        &IntegrationConfig::default(),
    )?)
}

fn residual(prior: &PriorFactorization, ts: &TrainingSet) -> DVector<f64> {
    let w = ts.len();
    let mut r = DVector::zeros(w * STATE_DIM);
    for i in 0..w {
        let d = ts.states[i] - prior.mean[i];
        r.rows_mut(i * STATE_DIM, STATE_DIM).copy_from(&dvec(&d));
    }
    r
}

fn log_det_mat6(m: &Mat6) -> Result<f64, HypertrainError> {
    let c = nalgebra::Cholesky::new(*m).ok_or(HypertrainError::IndefiniteNoiseBlock)?;
    Ok((0..STATE_DIM).map(|i| 2.0 * c.l_dirty()[(i, i)].ln()).sum())
}

/// Shared sparse pieces of the likelihood and its gradient.
struct Evaluation {
    lml: f64,
    /// a = P_w^{-1} r.
    a: DVector<f64>,
    /// Tridiagonal blocks of (P^{-1} + obs_var^{-1})^{-1}; `None` when the
    /// observation noise is zero or ignored.
    sigma_m: Option<crate::blocklin::CovBlocks>,
}

fn evaluate(
    prior: &PriorFactorization,
    ts: &TrainingSet,
    mode: TrainMode,
) -> Result<Evaluation, HypertrainError> {
    let w = ts.len();
    let d = (w * STATE_DIM) as f64;
    let r = residual(prior, ts);
    let pinv = prior.precision_system();
    // log|P| = sum log|Q_n| (+ log|P_0| = 0 for the identity anchor).
    let log_det_p: f64 = prior.q.iter().map(log_det_mat6).sum::<Result<f64, _>>()?;
    let ignore = mode == TrainMode::IgnoreObsNoise || ts.obs_var == 0.0;
    if ignore {
        let a = pinv.mul_vec(&r);
        let lml = -0.5 * r.dot(&a) - 0.5 * log_det_p - 0.5 * d * (2.0 * std::f64::consts::PI).ln();
        return Ok(Evaluation { lml, a, sigma_m: None });
    }
    let sv = ts.obs_var;
    // M = P^{-1} + obs_var^{-1} I; Woodbury gives
    // P_w^{-1} = sv^{-1} I - sv^{-2} M^{-1} and
    // log|P_w| = log|P| + D log sv + log|M|.
    let mut m = pinv;
    let eye = nalgebra::DMatrix::identity(STATE_DIM, STATE_DIM) / sv;
    for n in 0..w {
        m.add_to_diag(n, &eye);
    }
    let chol = m.cholesky()?;
    let minv_r = chol.solve(&r)?;
    let a = (&r - minv_r / sv) / sv;
    let log_det_pw = log_det_p + d * sv.ln() + chol.log_det();
    let lml =
        -0.5 * r.dot(&a) - 0.5 * log_det_pw - 0.5 * d * (2.0 * std::f64::consts::PI).ln();
    Ok(Evaluation { lml, a, sigma_m: Some(chol.inverse_blocks()) })
}

/// Log marginal likelihood of the training set under the given model.
pub fn log_marginal_likelihood(
    model: &PriorModel,
    ts: &TrainingSet,
    mode: TrainMode,
) -> Result<f64, HypertrainError> {
    let prior = training_prior(model, ts)?;
    Ok(evaluate(&prior, ts, mode)?.lml)
}

/// dQ_n / dqc_i over interval n (unit weight on diagonal entry i).
fn noise_block_derivative(
    prior: &PriorFactorization,
    n: usize,
    i: usize,
) -> Result<Mat6, HypertrainError> {
    let mut weight = Matrix3::zeros();
    weight[(i, i)] = 1.0;
    Ok(noise_block_weighted(
        &prior.model,
        &prior.op,
        prior.times[n],
        prior.times[n + 1],
        &weight,
        &prior.integ,
    )?)
}

/// Gradient of the log marginal likelihood with respect to log diag(Q_C),
/// together with the objective value.
pub fn lml_gradient(
    model: &PriorModel,
    ts: &TrainingSet,
    mode: TrainMode,
) -> Result<(Vector3<f64>, f64), HypertrainError> {
    let prior = training_prior(model, ts)?;
    let ev = evaluate(&prior, ts, mode)?;
    let w = ts.len();
    // b = F^T a by backward recursion: b_n = a_n + Phi_{n+1,n}^T b_{n+1}.
    let mut b = vec![Vec6::zeros(); w];
    b[w - 1] = Vec6::from_fn(|i, _| ev.a[(w - 1) * STATE_DIM + i]);
    for n in (0..w - 1).rev() {
        let a_n = Vec6::from_fn(|i, _| ev.a[n * STATE_DIM + i]);
        b[n] = a_n + prior.trans[n].transpose() * b[n + 1];
    }
    let mut grad = Vector3::zeros();
    for n in 0..w - 1 {
        // Trace weight (Q_w^{-1})_{n+1,n+1} = Qinv - Qinv X Qinv with
        // X = (F^{-1} Sigma_M F^{-T}) diagonal block n+1.
        let qinv = prior.qinv[n];
        let trace_weight = match &ev.sigma_m {
            None => qinv,
            Some(s) => {
                let k = n + 1;
                let s_kk = mat6(&s.diag[k]);
                let s_km = mat6(&s.offdiag[k - 1]); // (k, k-1) block
                let s_mm = mat6(&s.diag[k - 1]);
                let phi = prior.trans[n];
                let x = s_kk - phi * s_km.transpose() - s_km * phi.transpose()
                    + phi * s_mm * phi.transpose();
                qinv - qinv * x * qinv
            }
        };
        for i in 0..POSE_DIM {
            let dq = noise_block_derivative(&prior, n, i)?;
            let quad = 0.5 * (b[n + 1].transpose() * dq * b[n + 1])[0];
            let trace = 0.5 * (trace_weight * dq).trace();
            // Chain rule into log space.
            grad[i] += (quad - trace) * model.qc[i];
        }
    }
    Ok((grad, ev.lml))
}

/// Gradient ascent on log diag(Q_C) with backtracking step halving.
pub fn train(
    model0: &PriorModel,
    ts: &TrainingSet,
    config: &TrainConfig,
) -> Result<TrainResult, HypertrainError> {
    let mut theta = model0.qc.map(f64::ln);
    let with_qc = |theta: &Vector3<f64>| PriorModel { kind: model0.kind, qc: theta.map(f64::exp) };
    let (mut grad, mut lml) = lml_gradient(&with_qc(&theta), ts, config.mode)?;
    let mut trace = vec![(theta, lml)];
    let mut iters = 0;
    while iters < config.max_iters {
        if grad.amax() < config.grad_tol {
            return Ok(TrainResult {
                qc: theta.map(f64::exp),
                mode: config.mode,
                iterations: iters,
                final_lml: lml,
                trace,
            });
        }
        iters += 1;
        let mut step = config.init_step;
        loop {
            let cand = theta + grad * step;
            match lml_gradient(&with_qc(&cand), ts, config.mode) {
                Ok((g, l)) if l > lml => {
                    theta = cand;
                    grad = g;
                    lml = l;
                    trace.push((theta, lml));
                    break;
                }
                _ => {
                    step *= 0.5;
                    if step < 1e-12 {
                        // No ascent direction left at this resolution.
                        return Ok(TrainResult {
                            qc: theta.map(f64::exp),
                            mode: config.mode,
                            iterations: iters,
                            final_lml: lml,
                            trace,
                        });
                    }
                }
            }
        }
    }
    Err(HypertrainError::NotConverged {
        grad_norm: grad.amax(),
        iters,
        best: Box::new(TrainResult {
            qc: theta.map(f64::exp),
            mode: config.mode,
            iterations: iters,
            final_lml: lml,
            trace,
        }),
    })
}

fn mat6(m: &nalgebra::DMatrix<f64>) -> Mat6 {
    Mat6::from_fn(|i, j| m[(i, j)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::lti_noise_inverse;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn lti_model(qc: Vector3<f64>) -> PriorModel {
        PriorModel::new(PriorKind::LtiConstVel, qc)
    }

    /// Draws a trajectory from the discrete LTI prior.
    fn sample_lti(
        model: &PriorModel,
        times: &[f64],
        x0: Vec6,
        rng: &mut ChaCha8Rng,
    ) -> Vec<Vec6> {
        let op = OpTrajectory::Constant(Vec6::zeros());
        let integ = IntegrationConfig::default();
        let mut out = vec![x0];
        for i in 1..times.len() {
            let phi =
                crate::priors::transition(model, &op, times[i], times[i - 1], &integ).unwrap();
            let (q, _) =
                crate::priors::noise_block(model, &op, times[i - 1], times[i], &integ).unwrap();
            let l = nalgebra::Cholesky::new(q).unwrap().l();
            let xi = Vec6::from_fn(|_, _| rng.sample(StandardNormal));
            out.push(phi * out[i - 1] + l * xi);
        }
        out
    }

    fn training_set(
        model: &PriorModel,
        w: usize,
        obs_var: f64,
        seed: u64,
    ) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let times: Vec<f64> = (0..w).map(|i| i as f64 * 0.5).collect();
        let x0 = Vec6::new(0.0, 0.0, 0.0, 0.3, -0.1, 0.05);
        let mut states = sample_lti(model, &times, x0, &mut rng);
        if obs_var > 0.0 {
            let sd = obs_var.sqrt();
            for x in &mut states {
                *x += Vec6::from_fn(|_, _| sd * rng.sample::<f64, _>(StandardNormal));
            }
        }
        TrainingSet::new(times, states, obs_var).unwrap()
    }

    fn dense_lml(model: &PriorModel, ts: &TrainingSet) -> f64 {
        let prior = training_prior(model, ts).unwrap();
        let mut k = prior.dense_kernel();
        for i in 0..k.nrows() {
            k[(i, i)] += ts.obs_var;
        }
        let r = residual(&prior, ts);
        let chol = nalgebra::Cholesky::new(k).unwrap();
        let log_det: f64 = (0..chol.l_dirty().nrows())
            .map(|i| 2.0 * chol.l_dirty()[(i, i)].ln())
            .sum();
        let quad = r.dot(&chol.solve(&r));
        -0.5 * quad - 0.5 * log_det
            - 0.5 * r.len() as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn matches_dense_oracle_zero_noise() {
        let model = lti_model(Vector3::new(0.2, 0.3, 0.1));
        let ts = training_set(&model, 12, 0.0, 3);
        let sparse = log_marginal_likelihood(&model, &ts, TrainMode::Exact).unwrap();
        let dense = dense_lml(&model, &ts);
        assert_abs_diff_eq!(sparse, dense, epsilon = 1e-9 * dense.abs().max(1.0));
    }

    #[test]
    fn matches_dense_oracle_with_noise() {
        let model = lti_model(Vector3::new(0.2, 0.3, 0.1));
        for sv in [0.01, 0.04] {
            let ts = training_set(&model, 20, sv, 5);
            let sparse = log_marginal_likelihood(&model, &ts, TrainMode::Exact).unwrap();
            let dense = dense_lml(&model, &ts);
            assert_abs_diff_eq!(sparse, dense, epsilon = 1e-9 * dense.abs().max(1.0));
        }
    }

    #[test]
    fn zero_residual_drops_quadratic_term() {
        let model = lti_model(Vector3::new(0.2, 0.2, 0.1));
        let times: Vec<f64> = (0..8).map(|i| i as f64).collect();
        // Observations equal to the prior mean itself.
        let x0 = Vec6::new(1.0, -0.5, 0.2, 0.4, 0.1, -0.02);
        let prior = build_prior(
            &model,
            &times,
            &OpTrajectory::Constant(Vec6::zeros()),
            FirstKnot::Free { x0, p0: Mat6::identity() },
            &IntegrationConfig::default(),
        )
        .unwrap();
        let ts = TrainingSet::new(times, prior.mean.clone(), 0.0).unwrap();
        let lml = log_marginal_likelihood(&model, &ts, TrainMode::Exact).unwrap();
        let log_det: f64 =
            prior.q.iter().map(|q| log_det_mat6(q).unwrap()).sum();
        let d = (ts.len() * STATE_DIM) as f64;
        let expected = -0.5 * log_det - 0.5 * d * (2.0 * std::f64::consts::PI).ln();
        assert_abs_diff_eq!(lml, expected, epsilon = 1e-9 * expected.abs());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (sv, mode) in [
            (0.0, TrainMode::Exact),
            (0.02, TrainMode::Exact),
            (0.02, TrainMode::IgnoreObsNoise),
        ] {
            let truth = lti_model(Vector3::new(0.15, 0.25, 0.08));
            let ts = training_set(&truth, 10, sv, 9);
            let eval_model = lti_model(Vector3::new(0.2, 0.2, 0.1));
            let (grad, _) = lml_gradient(&eval_model, &ts, mode).unwrap();
            let h = 1e-5;
            for i in 0..3 {
                let mut hi = eval_model.qc.map(f64::ln);
                let mut lo = hi;
                hi[i] += h;
                lo[i] -= h;
                let f_hi =
                    log_marginal_likelihood(&lti_model(hi.map(f64::exp)), &ts, mode).unwrap();
                let f_lo =
                    log_marginal_likelihood(&lti_model(lo.map(f64::exp)), &ts, mode).unwrap();
                let fd = (f_hi - f_lo) / (2.0 * h);
                let rel = (grad[i] - fd).abs() / fd.abs().max(1.0);
                assert!(rel < 1e-5, "mode {mode:?} sv {sv} entry {i}: {} vs {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn modes_coincide_at_zero_obs_noise() {
        let model = lti_model(Vector3::new(0.2, 0.3, 0.1));
        let ts = training_set(&model, 15, 0.0, 21);
        let (g_exact, l_exact) = lml_gradient(&model, &ts, TrainMode::Exact).unwrap();
        let (g_fast, l_fast) = lml_gradient(&model, &ts, TrainMode::IgnoreObsNoise).unwrap();
        assert_abs_diff_eq!(l_exact, l_fast, epsilon = 1e-10 * l_exact.abs());
        assert!((g_exact - g_fast).amax() < 1e-8 * g_exact.amax().max(1.0));
    }

    #[test]
    fn lti_noise_derivative_closed_form() {
        let model = lti_model(Vector3::new(0.7, 0.2, 0.4));
        let times = [0.0, 1.7];
        let prior = build_prior(
            &model,
            &times,
            &OpTrajectory::Constant(Vec6::zeros()),
            FirstKnot::Free { x0: Vec6::zeros(), p0: Mat6::identity() },
            &IntegrationConfig::default(),
        )
        .unwrap();
        let dt = 1.7f64;
        for i in 0..POSE_DIM {
            let dq = noise_block_derivative(&prior, 0, i).unwrap();
            for j in 0..POSE_DIM {
                let ind = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(dq[(j, j)], dt.powi(3) / 3.0 * ind, epsilon = 1e-12);
                assert_abs_diff_eq!(dq[(j, j + POSE_DIM)], dt * dt / 2.0 * ind, epsilon = 1e-12);
                assert_abs_diff_eq!(
                    dq[(j + POSE_DIM, j + POSE_DIM)],
                    dt * ind,
                    epsilon = 1e-12
                );
            }
        }
        // Sanity: summing qc_i-weighted derivatives rebuilds Q^{-1}'s inverse.
        let qinv = lti_noise_inverse(dt, &model.qc);
        let mut q = Mat6::zeros();
        for i in 0..POSE_DIM {
            q += noise_block_derivative(&prior, 0, i).unwrap() * model.qc[i];
        }
        assert!(((q * qinv) - Mat6::identity()).norm() < 1e-9);
    }

    #[test]
    fn sparse_solve_matches_dense_small() {
        // P_w^{-1} v along the sparse route vs dense (P + sv I)^{-1} v.
        let model = lti_model(Vector3::new(0.3, 0.2, 0.15));
        let ts = training_set(&model, 25, 0.05, 13);
        let prior = training_prior(&model, &ts).unwrap();
        let ev = evaluate(&prior, &ts, TrainMode::Exact).unwrap();
        let mut k = prior.dense_kernel();
        for i in 0..k.nrows() {
            k[(i, i)] += ts.obs_var;
        }
        let r = residual(&prior, &ts);
        let dense_a = nalgebra::Cholesky::new(k).unwrap().solve(&r);
        assert!((&ev.a - &dense_a).norm() < 1e-8 * dense_a.norm());
    }

    #[test]
    fn objective_invariant_to_record_order() {
        let model = lti_model(Vector3::new(0.2, 0.3, 0.1));
        let ts = training_set(&model, 15, 0.01, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut idx: Vec<usize> = (0..ts.len()).collect();
        idx.shuffle(&mut rng);
        let shuffled = TrainingSet::new(
            idx.iter().map(|&i| ts.times[i]).collect(),
            idx.iter().map(|&i| ts.states[i]).collect(),
            ts.obs_var,
        )
        .unwrap();
        let a = log_marginal_likelihood(&model, &ts, TrainMode::Exact).unwrap();
        let b = log_marginal_likelihood(&model, &shuffled, TrainMode::Exact).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12 * a.abs());
    }

    #[test]
    fn truth_is_local_maximum() {
        let truth = lti_model(Vector3::new(0.1, 0.1, 0.05));
        let ts = training_set(&truth, 1000, 0.0, 41);
        let at_truth = log_marginal_likelihood(&truth, &ts, TrainMode::Exact).unwrap();
        for i in 0..3 {
            for factor in [3.0, 1.0 / 3.0] {
                let mut qc = truth.qc;
                qc[i] *= factor;
                let perturbed =
                    log_marginal_likelihood(&lti_model(qc), &ts, TrainMode::Exact).unwrap();
                assert!(
                    at_truth > perturbed,
                    "entry {i} x{factor}: {at_truth} vs {perturbed}"
                );
            }
        }
    }

    #[test]
    fn training_recovers_qc() {
        let truth = lti_model(Vector3::new(0.1, 0.1, 0.05));
        let ts = training_set(&truth, 600, 0.0, 17);
        let start = lti_model(Vector3::new(0.3, 0.03, 0.2));
        let result = train(&start, &ts, &TrainConfig::default()).unwrap();
        for i in 0..3 {
            let ratio: f64 = result.qc[i] / truth.qc[i];
            assert!(
                ratio > 0.65 && ratio < 1.5,
                "entry {i}: fitted {} truth {}",
                result.qc[i],
                truth.qc[i]
            );
        }
        // Monotone-improving trace.
        for w in result.trace.windows(2) {
            assert!(w[1].1 > w[0].1);
        }
    }

    #[test]
    fn ignore_obs_noise_biases_upward() {
        let truth = lti_model(Vector3::new(0.1, 0.1, 0.05));
        let ts = training_set(&truth, 800, 0.05, 23);
        let start = lti_model(Vector3::new(0.15, 0.08, 0.07));
        let cfg = TrainConfig::default();
        let exact = train(&start, &ts, &cfg).unwrap();
        let fast =
            train(&start, &ts, &TrainConfig { mode: TrainMode::IgnoreObsNoise, ..cfg }).unwrap();
        for i in 0..3 {
            assert!(
                fast.qc[i] > exact.qc[i],
                "entry {i}: fast {} exact {}",
                fast.qc[i],
                exact.qc[i]
            );
        }
    }

    #[test]
    fn pose_truth_velocity_differencing() {
        // Constant-velocity pose track: differenced velocities are exact.
        let times: Vec<f64> = (0..10).map(|i| i as f64 * 0.2).collect();
        let poses: Vec<Vector3<f64>> = times
            .iter()
            .map(|&t| Vector3::new(1.0 + 0.5 * t, -0.3 * t, 0.1 * t))
            .collect();
        let ts = TrainingSet::from_pose_truth(times, poses, &PriorKind::LtiConstVel, 0.0).unwrap();
        for x in &ts.states {
            assert_abs_diff_eq!(x[3], 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(x[4], -0.3, epsilon = 1e-12);
            assert_abs_diff_eq!(x[5], 0.1, epsilon = 1e-12);
        }
    }
}
