//! Constant-time trajectory queries.
//!
//! A query at time tau inside interval [t_n, t_{n+1}] touches only the two
//! bracketing knots, through the coefficients Lambda(tau) and Psi(tau) — the
//! two non-zero block columns of P(tau) P^{-1}. Queries past the last knot
//! extrapolate from the final knot alone.

use nalgebra::Matrix3;
use thiserror::Error;

use crate::blocklin::CovBlocks;
use crate::priors::{
    noise_block_weighted, transition, Mat6, PriorError, PriorFactorization, Vec6, STATE_DIM,
};

/// Query time equal to a knot time within this tolerance short-circuits to
/// the knot value (avoids integrating a zero-length noise accumulation).
const KNOT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("query time {tau} precedes trajectory start {start}")]
    BeforeStart { tau: f64, start: f64 },
    #[error("time {0} outside the keytime range")]
    OutsideKeytimeRange(f64),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bracket {
    /// tau in [t_n, t_{n+1}); holds n.
    Interior(usize),
    /// tau at or past the last knot.
    Extrapolate,
}

/// Interpolation coefficients at a single query time.
#[derive(Debug, Clone)]
pub struct InterpCoefficients {
    pub bracket: Bracket,
    pub lambda: Mat6,
    /// Zero for extrapolation.
    pub psi: Mat6,
    pub prior_mean: Vec6,
    pub prior_cov: Mat6,
}

/// Lambda/Psi, prior mean, and prior covariance at tau.
pub fn coefficients(
    prior: &PriorFactorization,
    tau: f64,
) -> Result<InterpCoefficients, QueryError> {
    let t0 = prior.times[0];
    if tau < t0 - KNOT_TOL {
        return Err(QueryError::BeforeStart { tau, start: t0 });
    }
    // Exact knot hit: Lambda = 1, Psi = 0 against that knot.
    if let Some(n) = knot_index(prior, tau) {
        let bracket = if n + 1 == prior.n_knots() {
            Bracket::Extrapolate
        } else {
            Bracket::Interior(n)
        };
        return Ok(InterpCoefficients {
            bracket,
            lambda: Mat6::identity(),
            psi: Mat6::zeros(),
            prior_mean: prior.mean[n],
            prior_cov: prior.knot_cov[n],
        });
    }
    let model = &prior.model;
    let integ = &prior.integ;
    match prior.interval_of(tau) {
        Some(n) => {
            let tn = prior.times[n];
            let phi_tau = transition(model, &prior.op, tau, tn, integ)?;
            let q_tau = noise_block_weighted(
                model,
                &prior.op,
                tn,
                tau,
                &Matrix3::from_diagonal(&model.qc),
                integ,
            )?;
            // Phi(t_{n+1}, tau) from the cached interval transition.
            let phi_end = prior.trans[n]
                * phi_tau
                    .try_inverse()
                    .ok_or(PriorError::SingularNoiseBlock(tn, tau))?;
            let psi = q_tau * phi_end.transpose() * prior.qinv[n];
            let lambda = phi_tau - psi * prior.trans[n];
            let prior_mean = prior.mean_at(tau)?;
            let prior_cov = phi_tau * prior.knot_cov[n] * phi_tau.transpose() + q_tau;
            Ok(InterpCoefficients {
                bracket: Bracket::Interior(n),
                lambda,
                psi,
                prior_mean,
                prior_cov,
            })
        }
        None => {
            let last = prior.n_knots() - 1;
            let tn = prior.times[last];
            let phi_tau = transition(model, &prior.op, tau, tn, integ)?;
            let q_tau = noise_block_weighted(
                model,
                &prior.op,
                tn,
                tau,
                &Matrix3::from_diagonal(&model.qc),
                integ,
            )?;
            let prior_mean = prior.mean_at(tau)?;
            let prior_cov = phi_tau * prior.knot_cov[last] * phi_tau.transpose() + q_tau;
            Ok(InterpCoefficients {
                bracket: Bracket::Extrapolate,
                lambda: phi_tau,
                psi: Mat6::zeros(),
                prior_mean,
                prior_cov,
            })
        }
    }
}

fn knot_index(prior: &PriorFactorization, tau: f64) -> Option<usize> {
    // Binary search, then check the two candidates around the insertion
    // point for coincidence.
    let times = &prior.times;
    let i = times.partition_point(|&t| t < tau);
    for cand in [i.wrapping_sub(1), i] {
        if let Some(&t) = times.get(cand) {
            if (t - tau).abs() <= KNOT_TOL {
                return Some(cand);
            }
        }
    }
    None
}

/// Posterior mean at tau from the converged knot estimates.
pub fn query_mean(
    prior: &PriorFactorization,
    knots: &[Vec6],
    tau: f64,
) -> Result<Vec6, QueryError> {
    let c = coefficients(prior, tau)?;
    Ok(apply_mean(prior, &c, knots))
}

pub(crate) fn apply_mean(
    prior: &PriorFactorization,
    c: &InterpCoefficients,
    knots: &[Vec6],
) -> Vec6 {
    match c.bracket {
        Bracket::Interior(n) => {
            c.prior_mean
                + c.lambda * (knots[n] - prior.mean[n])
                + c.psi * (knots[n + 1] - prior.mean[n + 1])
        }
        Bracket::Extrapolate => {
            let last = prior.n_knots() - 1;
            c.prior_mean + c.lambda * (knots[last] - prior.mean[last])
        }
    }
}

/// Posterior covariance at tau from the block-tridiagonal portion of the
/// posterior covariance at the knots.
pub fn query_cov(
    prior: &PriorFactorization,
    cov: &CovBlocks,
    tau: f64,
) -> Result<Mat6, QueryError> {
    let c = coefficients(prior, tau)?;
    let out = match c.bracket {
        Bracket::Interior(n) => {
            let post_nn = mat6(&cov.diag[n]);
            let post_n1n1 = mat6(&cov.diag[n + 1]);
            // CovBlocks stores the lower (n+1, n) block.
            let post_n_n1 = mat6(&cov.offdiag[n]).transpose();
            let prior_nn = prior.knot_cov[n];
            let prior_n1n1 = prior.knot_cov[n + 1];
            let prior_n_n1 = prior.knot_cov[n] * prior.trans[n].transpose();
            let d_nn = post_nn - prior_nn;
            let d_n1 = post_n_n1 - prior_n_n1;
            let d_n1n1 = post_n1n1 - prior_n1n1;
            c.prior_cov
                + c.lambda * d_nn * c.lambda.transpose()
                + c.lambda * d_n1 * c.psi.transpose()
                + c.psi * d_n1.transpose() * c.lambda.transpose()
                + c.psi * d_n1n1 * c.psi.transpose()
        }
        Bracket::Extrapolate => {
            let last = prior.n_knots() - 1;
            let d = mat6(&cov.diag[last]) - prior.knot_cov[last];
            c.prior_cov + c.lambda * d * c.lambda.transpose()
        }
    };
    Ok((out + out.transpose()) * 0.5)
}

/// Coefficients mapping keytime states to the state at a measurement time.
///
/// Returns (Lambda, Psi, bracketing keytime indices). The measurement time
/// must lie inside the keytime range; a time equal to a keytime reduces to
/// an ordinary unary measurement (Psi = 0).
pub fn keytime_measurement_matrices(
    prior: &PriorFactorization,
    t_meas: f64,
) -> Result<(Mat6, Mat6, (usize, usize)), QueryError> {
    let last = *prior.times.last().unwrap();
    if t_meas > last + KNOT_TOL || t_meas < prior.times[0] - KNOT_TOL {
        return Err(QueryError::OutsideKeytimeRange(t_meas));
    }
    let c = coefficients(prior, t_meas)?;
    match c.bracket {
        Bracket::Interior(n) => Ok((c.lambda, c.psi, (n, n + 1))),
        Bracket::Extrapolate => {
            // Only reachable when t_meas coincides with the final keytime.
            let n = prior.n_knots() - 1;
            Ok((c.lambda, c.psi, (n, n)))
        }
    }
}

fn mat6(m: &nalgebra::DMatrix<f64>) -> Mat6 {
    debug_assert_eq!((m.nrows(), m.ncols()), (STATE_DIM, STATE_DIM));
    Mat6::from_fn(|i, j| m[(i, j)])
}
