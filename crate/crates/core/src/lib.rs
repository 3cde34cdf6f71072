//! Batch continuous-time trajectory estimation as exactly sparse
//! Gaussian-process regression.
//!
//! A robot trajectory is modelled as a one-dimensional GP over time, with the
//! prior generated by a stochastic differential equation driven by white
//! noise. Because the stacked (Markovian) state makes the inverse kernel
//! matrix block-tridiagonal, the batch Gauss-Newton solve is linear in the
//! number of knots, trajectory queries at arbitrary times are constant-time,
//! and hyperparameter training exploits the same sparsity.
//!
//! Module map:
//! - [`blocklin`]: block-tridiagonal and arrowhead (trajectory + landmark)
//!   linear systems, Cholesky factorization, solves, partial inverses.
//! - [`priors`]: SDE motion priors (LTI constant-velocity, nonlinear
//!   body-frame constant-velocity, Matern-3/2) in lifted form.
//! - [`gpinterp`]: O(1) posterior/prior queries and keytime measurement
//!   interpolation.
//! - [`estimator`]: batch Gauss-Newton over trajectory and landmarks.
//! - [`hypertrain`]: log-marginal-likelihood training of the process-noise
//!   power spectral density.
//! - [`simworld`]: seeded 2D simulator and dataset file formats.

pub mod blocklin;
pub mod estimator;
pub mod gpinterp;
pub mod hypertrain;
pub mod priors;
pub mod simworld;

pub use blocklin::{ArrowheadSystem, BlockCholesky, BlockTridiagonalSystem, CovBlocks};
pub use estimator::{
    BearingFrame, ConvergenceConfig, EstimatorError, KeytimeConfig, MeasurementKind,
    MeasurementLog, MeasurementRecord, SolveReport, SteamProblem,
};
pub use gpinterp::{query_cov, query_mean, InterpCoefficients};
pub use hypertrain::{TrainConfig, TrainMode, TrainResult, TrainingSet};
pub use priors::{FirstKnot, OpTrajectory, PriorFactorization, PriorKind, PriorModel};
pub use simworld::{GroundTruth, WorldConfig};
