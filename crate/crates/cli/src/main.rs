//! Command-line front end: dataset simulation, batch solving, hyperparameter
//! training, constant-time trajectory queries, and the complexity benchmark.
//!
//! All outputs are plot-ready CSV/JSON. Failures print a machine-readable
//! `{"error": ...}` object on stderr and exit 1; a non-converged solve still
//! writes its partial results and exits 2.

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use steamgp::estimator::{BearingFrame, MeasurementKind, SolveReport};
use steamgp::gpinterp;
use steamgp::hypertrain::{self, TrainConfig, TrainMode, TrainingSet};
use steamgp::priors::{
    build_prior, FirstKnot, IntegrationConfig, Mat6, OpTrajectory, PriorFactorization, PriorKind,
    PriorModel, Vec6,
};
use steamgp::simworld::{self, GroundTruth, WorldConfig};
use steamgp::{EstimatorError, SteamProblem};

mod bench;

#[derive(Parser)]
#[command(
    name = "steamgp",
    about = "Continuous-time trajectory estimation with sparse GP motion priors",
    long_about = None,
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PriorArg {
    Lti,
    Ntv,
    Matern,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a world and write log.jsonl, truth.csv, landmarks.csv,
    /// config.json into the output directory.
    Simulate {
        /// World configuration JSON (missing fields take defaults).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Batch-solve a dataset; writes the trajectory CSV
    /// (t,x,y,theta,vel1,vel2,vel3,sigma3_x,sigma3_y,sigma3_theta,is_knot)
    /// and a solve-report JSON next to it.
    Solve(SolveArgs),
    /// Fit the process-noise spectral density to ground truth; writes
    /// {"entries": [..], "mode": .., "iterations": .., "final_lml": ..}.
    Train {
        #[arg(long, value_enum)]
        prior: PriorArg,
        /// Ground-truth CSV (t,x,y,theta,vel1,vel2,vel3).
        #[arg(long)]
        truth: PathBuf,
        /// exact keeps observation noise in the likelihood; fast ignores it.
        #[arg(long, default_value = "exact")]
        mode: String,
        /// Observation noise variance on the ground truth.
        #[arg(long, default_value_t = 0.0)]
        obs_var: f64,
        /// Initial Q_C diagonal.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.1, 0.1, 0.1])]
        init_qc: Vec<f64>,
        /// Matern length scale (matern prior only).
        #[arg(long, default_value_t = 1.0)]
        ell: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Constant-time trajectory queries against a saved solve report.
    Query {
        /// Solve-report JSON written by `solve`.
        #[arg(long)]
        report: PathBuf,
        /// Comma-separated times, or @file with one time per line.
        #[arg(long)]
        times: String,
    },
    /// Timing benchmark over trajectory lengths; writes a CSV with per-N
    /// rows and fitted log-log slopes. STEAMGP_THREADS caps the pool.
    Bench(bench::BenchArgs),
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long, value_enum)]
    prior: PriorArg,
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    dataset: PathBuf,
    /// Trajectory CSV output; the report JSON lands beside it.
    #[arg(long)]
    out: PathBuf,
    /// Estimate on a uniform keytime grid instead of at measurement times.
    #[arg(long)]
    keytime_spacing: Option<f64>,
    /// Drop odometry records before solving.
    #[arg(long)]
    no_odom: bool,
    /// Extra interpolated output rows at this rate.
    #[arg(long)]
    query_rate: Option<f64>,
    /// Override the dataset Q_C diagonal.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    qc: Option<Vec<f64>>,
    /// Matern length scale (matern prior only).
    #[arg(long, default_value_t = 1.0)]
    ell: f64,
    /// Append an error-report row (rb_interval, odometry_used, solver,
    /// rms_translation_m, rms_rotation_rad, seeds_used) to this CSV.
    #[arg(long)]
    error_csv: Option<PathBuf>,
    /// Use the dense reference solver (verification; O(N^3)).
    #[arg(long)]
    dense: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportFile {
    model: PriorModel,
    bearing_frame: BearingFrame,
    x0: Vec6,
    p0: Mat6,
    report: SolveReport,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.to_string() });
            eprintln!("{msg}");
            1
        }
    };
    std::process::exit(code);
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Sim(#[from] simworld::SimError),
    #[error(transparent)]
    Estimator(#[from] steamgp::EstimatorError),
    #[error(transparent)]
    Train(#[from] hypertrain::HypertrainError),
    #[error(transparent)]
    Query(#[from] gpinterp::QueryError),
    #[error(transparent)]
    Prior(#[from] steamgp::priors::PriorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Simulate { config, seed, out } => {
            let mut cfg: WorldConfig = match config {
                Some(path) => serde_json::from_reader(fs::File::open(path)?)
                    .map_err(|e| CliError::Other(format!("config: {e}")))?,
                None => WorldConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (truth, log) = simworld::simulate(&cfg)?;
            simworld::save_dataset(&out, &truth, &log, &cfg)?;
            println!(
                "{}",
                serde_json::json!({
                    "out": out,
                    "records": log.records.len(),
                    "landmarks": truth.landmarks.len(),
                })
            );
            Ok(0)
        }
        Command::Solve(args) => cmd_solve(args),
        Command::Train { prior, truth, mode, obs_var, init_qc, ell, out } => {
            let truth = simworld::load_truth(&truth)?;
            let kind = prior_kind(prior, ell);
            let ts = TrainingSet::new(truth.times.clone(), truth.states.clone(), obs_var)?;
            let mode = match mode.as_str() {
                "exact" => TrainMode::Exact,
                "fast" => TrainMode::IgnoreObsNoise,
                other => return Err(CliError::Other(format!("unknown mode {other:?}"))),
            };
            let model = PriorModel::new(kind, Vector3::new(init_qc[0], init_qc[1], init_qc[2]));
            let config = TrainConfig { mode, ..TrainConfig::default() };
            let result = hypertrain::train(&model, &ts, &config)?;
            let doc = serde_json::json!({
                "entries": [result.qc[0], result.qc[1], result.qc[2]],
                "mode": match mode { TrainMode::Exact => "exact", TrainMode::IgnoreObsNoise => "fast" },
                "iterations": result.iterations,
                "final_lml": result.final_lml,
            });
            fs::write(&out, serde_json::to_string_pretty(&doc).unwrap())?;
            println!("{doc}");
            Ok(0)
        }
        Command::Query { report, times } => {
            let rf: ReportFile = serde_json::from_reader(fs::File::open(report)?)
                .map_err(|e| CliError::Other(format!("report: {e}")))?;
            let prior = rebuild_prior(&rf)?;
            let cov = rf.report.cov_blocks();
            println!("t,x,y,theta,vel1,vel2,vel3,sigma3_x,sigma3_y,sigma3_theta");
            for t in parse_times(&times)? {
                let x = gpinterp::query_mean(&prior, &rf.report.knots, t)?;
                let p = gpinterp::query_cov(&prior, &cov, t)?;
                println!(
                    "{},{},{},{},{},{},{},{},{},{}",
                    t,
                    x[0],
                    x[1],
                    x[2],
                    x[3],
                    x[4],
                    x[5],
                    3.0 * p[(0, 0)].max(0.0).sqrt(),
                    3.0 * p[(1, 1)].max(0.0).sqrt(),
                    3.0 * p[(2, 2)].max(0.0).sqrt(),
                );
            }
            Ok(0)
        }
        Command::Bench(args) => {
            bench::run(args).map_err(CliError::Other)?;
            Ok(0)
        }
    }
}

fn prior_kind(arg: PriorArg, ell: f64) -> PriorKind {
    match arg {
        PriorArg::Lti => PriorKind::LtiConstVel,
        PriorArg::Ntv => PriorKind::NtvBodyConstVel,
        PriorArg::Matern => PriorKind::Matern32 { sigma: 1.0, ell },
    }
}

/// Converts a state between velocity conventions of two prior kinds.
fn convert_velocity(x: &Vec6, from: &PriorKind, to: &PriorKind) -> Vec6 {
    let from_body = matches!(from, PriorKind::NtvBodyConstVel);
    let to_body = matches!(to, PriorKind::NtvBodyConstVel);
    if from_body == to_body {
        return *x;
    }
    let (s, c) = x[2].sin_cos();
    let mut out = *x;
    if from_body {
        // body -> inertial
        out[3] = c * x[3] - s * x[4];
        out[4] = s * x[3] + c * x[4];
    } else {
        // inertial -> body
        out[3] = c * x[3] + s * x[4];
        out[4] = -s * x[3] + c * x[4];
    }
    out
}

fn cmd_solve(args: SolveArgs) -> Result<i32, CliError> {
    let (truth, mut log, cfg) = simworld::load_dataset(&args.dataset)?;
    if args.no_odom {
        log.records
            .retain(|r| !matches!(r.kind, MeasurementKind::Odometry));
    }
    if log.records.is_empty() {
        return Err(CliError::Other("no measurements left to solve on".into()));
    }
    let kind = prior_kind(args.prior, args.ell);
    let qc = match &args.qc {
        Some(v) => Vector3::new(v[0], v[1], v[2]),
        None => cfg.qc,
    };
    let model = PriorModel::new(kind, qc);
    let n_landmarks = truth.landmarks.len();
    let x0 = convert_velocity(&cfg.x0, &cfg.kind, &kind);
    let p0 = Mat6::identity();
    let mut problem = match args.keytime_spacing {
        None => SteamProblem::at_measurement_times(model, &log, n_landmarks, x0, p0),
        Some(s) => SteamProblem::with_uniform_keytimes(model, &log, n_landmarks, s, x0, p0),
    };
    problem.bearing_frame = cfg.bearing_frame;
    let solved = if args.dense { problem.solve_dense(&log) } else { problem.solve(&log) };
    let (report, exit_code) = match solved {
        Ok(r) => (r, 0),
        Err(EstimatorError::NotConverged { report, .. }) => (*report, 2),
        Err(e) => return Err(e.into()),
    };

    let rf = ReportFile {
        model: problem.model.clone(),
        bearing_frame: problem.bearing_frame,
        x0,
        p0,
        report,
    };
    write_outputs(&args, &rf, &truth, &cfg)?;
    Ok(exit_code)
}

fn write_outputs(
    args: &SolveArgs,
    rf: &ReportFile,
    truth: &GroundTruth,
    cfg: &WorldConfig,
) -> Result<(), CliError> {
    let prior = rebuild_prior(rf)?;
    let cov = rf.report.cov_blocks();
    let report = &rf.report;

    // Trajectory CSV: knot rows plus optional interpolated rows, merged by
    // time.
    let mut times: Vec<(f64, bool)> = report.times.iter().map(|&t| (t, true)).collect();
    if let Some(rate) = args.query_rate {
        let t0 = report.times[0];
        let t1 = *report.times.last().unwrap();
        let n = ((t1 - t0) * rate).floor() as usize;
        for k in 0..=n {
            let t = t0 + k as f64 / rate;
            if report.times.iter().all(|&kt| (kt - t).abs() > 1e-9) {
                times.push((t, false));
            }
        }
        times.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    }
    let mut w = BufWriter::new(fs::File::create(&args.out)?);
    writeln!(w, "t,x,y,theta,vel1,vel2,vel3,sigma3_x,sigma3_y,sigma3_theta,is_knot")?;
    for (t, is_knot) in &times {
        let x = gpinterp::query_mean(&prior, &report.knots, *t)?;
        let p = gpinterp::query_cov(&prior, &cov, *t)?;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            t,
            x[0],
            x[1],
            x[2],
            x[3],
            x[4],
            x[5],
            3.0 * p[(0, 0)].max(0.0).sqrt(),
            3.0 * p[(1, 1)].max(0.0).sqrt(),
            3.0 * p[(2, 2)].max(0.0).sqrt(),
            *is_knot as u8,
        )?;
    }
    drop(w);

    let report_path = args.out.with_extension("report.json");
    fs::write(&report_path, serde_json::to_string(rf).unwrap())?;

    // RMS against ground truth over a 10 Hz query grid.
    let (rms_t, rms_r) = rms_against_truth(&prior, report, truth)?;
    if let Some(csv) = &args.error_csv {
        append_error_row(csv, cfg, args, rms_t, rms_r)?;
    }
    println!(
        "{}",
        serde_json::json!({
            "out": args.out,
            "report": report_path,
            "converged": report.converged,
            "iterations": report.iterations,
            "rms_translation_m": rms_t,
            "rms_rotation_rad": rms_r,
        })
    );
    Ok(())
}

fn rms_against_truth(
    prior: &PriorFactorization,
    report: &SolveReport,
    truth: &GroundTruth,
) -> Result<(f64, f64), CliError> {
    let t0 = report.times[0];
    let t1 = *report.times.last().unwrap();
    let n = ((t1 - t0) * 10.0).floor() as usize;
    let mut sum_t = 0.0;
    let mut sum_r = 0.0;
    for k in 0..=n {
        let t = t0 + k as f64 * 0.1;
        let x = gpinterp::query_mean(prior, &report.knots, t)?;
        let g = truth.state_at(t);
        sum_t += (x.xy() - g.xy()).norm_squared();
        let dtheta = steamgp::estimator::wrap_angle(x[2] - g[2]);
        sum_r += dtheta * dtheta;
    }
    let m = (n + 1) as f64;
    Ok(((sum_t / m).sqrt(), (sum_r / m).sqrt()))
}

fn append_error_row(
    path: &Path,
    cfg: &WorldConfig,
    args: &SolveArgs,
    rms_t: f64,
    rms_r: f64,
) -> Result<(), CliError> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(
            f,
            "rb_interval_s,odometry_used,solver,rms_translation_m,rms_rotation_rad,seeds_used"
        )?;
    }
    let solver = match (args.prior, args.dense) {
        (_, true) => "dense-baseline",
        (PriorArg::Ntv, _) => "sparse-ntv",
        _ => "sparse-lti",
    };
    writeln!(
        f,
        "{},{},{},{},{},{}",
        cfg.rb_interval,
        !args.no_odom,
        solver,
        rms_t,
        rms_r,
        1
    )?;
    Ok(())
}

fn rebuild_prior(rf: &ReportFile) -> Result<PriorFactorization, CliError> {
    let op = if rf.model.kind.is_nonlinear() {
        OpTrajectory::DeadReckon {
            times: rf.report.times.clone(),
            knots: rf.report.knots.clone(),
        }
    } else {
        OpTrajectory::Constant(Vec6::zeros())
    };
    Ok(build_prior(
        &rf.model,
        &rf.report.times,
        &op,
        FirstKnot::Free { x0: rf.x0, p0: rf.p0 },
        &IntegrationConfig::default(),
    )?)
}

fn parse_times(spec: &str) -> Result<Vec<f64>, CliError> {
    let texts: Vec<String> = if let Some(path) = spec.strip_prefix('@') {
        fs::read_to_string(path)?
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty() && !l.starts_with('#') && !l.starts_with('t'))
            .collect()
    } else {
        spec.split(',').map(|s| s.trim().to_string()).collect()
    };
    let mut out = Vec::with_capacity(texts.len());
    for t in texts {
        // Accept bare times or leading CSV columns.
        let first = t.split(',').next().unwrap();
        out.push(
            first
                .parse()
                .map_err(|e| CliError::Other(format!("bad time {first:?}: {e}")))?,
        );
    }
    Ok(out)
}
