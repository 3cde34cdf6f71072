//! Timing benchmark: solves simulated datasets of increasing length and
//! reports build/solve/query timings with fitted log-log slopes.

use std::collections::VecDeque;
use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Instant;

use clap::Args;

use steamgp::gpinterp;
use steamgp::priors::{build_prior, FirstKnot, IntegrationConfig, Mat6, OpTrajectory, Vec6};
use steamgp::simworld::{self, WorldConfig};
use steamgp::{PriorKind, SteamProblem};

#[derive(Args)]
pub struct BenchArgs {
    /// Trajectory lengths in seconds (one knot per second).
    #[arg(long, value_delimiter = ',', default_values_t = [500usize, 1000, 2000, 4000, 8000])]
    n: Vec<usize>,
    /// Solvers to time: sparse-lti, sparse-ntv, dense.
    #[arg(long, value_delimiter = ',', default_values_t = ["sparse-lti".to_string(), "sparse-ntv".to_string()])]
    solvers: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Queries timed per trial.
    #[arg(long, default_value_t = 200)]
    queries: usize,
}

/// The dense baseline is O(N^3) in time and O(N^2) in memory; longer runs
/// are pointless and slow, so its rows are capped here.
const DENSE_CAP: usize = 800;

#[derive(Clone)]
struct BenchRow {
    solver: String,
    n: usize,
    kernel_build_s: f64,
    per_iter_solve_s: f64,
    per_query_s: f64,
    total_s: f64,
    iterations: usize,
}

pub fn run(args: BenchArgs) -> Result<(), String> {
    let mut jobs: VecDeque<(String, usize)> = VecDeque::new();
    for solver in &args.solvers {
        match solver.as_str() {
            "sparse-lti" | "sparse-ntv" | "dense" => {}
            other => return Err(format!("unknown solver {other:?}")),
        }
        for &n in &args.n {
            if solver == "dense" && n > DENSE_CAP {
                eprintln!("# skipping dense at n={n} (cap {DENSE_CAP})");
                continue;
            }
            jobs.push_back((solver.clone(), n));
        }
    }

    let threads: usize = std::env::var("STEAMGP_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1)
        .clamp(1, jobs.len().max(1));
    let queue = Mutex::new(jobs);
    let rows = Mutex::new(Vec::<BenchRow>::new());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let job = queue.lock().unwrap().pop_front();
                let Some((solver, n)) = job else { break };
                match trial(&solver, n, args.queries) {
                    Ok(row) => {
                        eprintln!(
                            "# {} n={} total={:.3}s iters={}",
                            row.solver, row.n, row.total_s, row.iterations
                        );
                        rows.lock().unwrap().push(row);
                    }
                    Err(e) => eprintln!("# {solver} n={n} failed: {e}"),
                }
            });
        }
    });
    let mut rows = rows.into_inner().unwrap();
    rows.sort_by(|a, b| (&a.solver, a.n).cmp(&(&b.solver, b.n)));

    let mut w = fs::File::create(&args.out).map_err(|e| e.to_string())?;
    let emit = |w: &mut fs::File, line: &str| {
        writeln!(w, "{line}").map_err(|e| e.to_string())?;
        println!("{line}");
        Ok::<_, String>(())
    };
    emit(
        &mut w,
        "solver,n,kernel_build_s,per_iter_solve_s,per_query_s,total_s,iterations",
    )?;
    for r in &rows {
        emit(
            &mut w,
            &format!(
                "{},{},{:.6e},{:.6e},{:.6e},{:.6e},{}",
                r.solver, r.n, r.kernel_build_s, r.per_iter_solve_s, r.per_query_s, r.total_s,
                r.iterations
            ),
        )?;
    }
    for solver in &args.solvers {
        let group: Vec<&BenchRow> = rows.iter().filter(|r| &r.solver == solver).collect();
        if group.len() < 2 {
            continue;
        }
        for (col, get) in [
            ("kernel_build_s", (|r: &BenchRow| r.kernel_build_s) as fn(&BenchRow) -> f64),
            ("per_iter_solve_s", |r| r.per_iter_solve_s),
            ("per_query_s", |r| r.per_query_s),
            ("total_s", |r| r.total_s),
        ] {
            let pts: Vec<(f64, f64)> = group
                .iter()
                .map(|r| ((r.n as f64).ln(), get(r).max(1e-12).ln()))
                .collect();
            emit(&mut w, &format!("# slope,{},{},{:.3}", solver, col, ls_slope(&pts)))?;
        }
    }
    Ok(())
}

fn trial(solver: &str, n: usize, queries: usize) -> Result<BenchRow, String> {
    let kind = match solver {
        "sparse-ntv" => PriorKind::NtvBodyConstVel,
        _ => PriorKind::LtiConstVel,
    };
    let cfg = WorldConfig {
        seed: 7,
        duration: n as f64,
        landmark_count: 5,
        // Every landmark visible from everywhere: the measurement count
        // scales exactly linearly with n.
        max_range: 1e12,
        kind,
        ..WorldConfig::default()
    };
    let start = Instant::now();
    let (_truth, log) = simworld::simulate(&cfg).map_err(|e| e.to_string())?;

    let problem = SteamProblem::at_measurement_times(
        cfg.model(),
        &log,
        cfg.landmark_count,
        cfg.x0,
        Mat6::identity(),
    );

    // Prior construction timed in isolation around the initial guess.
    let op = if kind.is_nonlinear() {
        OpTrajectory::DeadReckon {
            times: problem.times.clone(),
            knots: vec![cfg.x0; problem.times.len()],
        }
    } else {
        OpTrajectory::Constant(Vec6::zeros())
    };
    let tk = Instant::now();
    let prior = build_prior(
        &problem.model,
        &problem.times,
        &op,
        FirstKnot::Free { x0: cfg.x0, p0: Mat6::identity() },
        &IntegrationConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let kernel_build_s = tk.elapsed().as_secs_f64();

    let report = if solver == "dense" {
        problem.solve_dense(&log)
    } else {
        problem.solve(&log)
    }
    .map_err(|e| e.to_string())?;
    let per_iter_solve_s =
        report.iters.iter().map(|s| s.wall_s).sum::<f64>() / report.iters.len() as f64;

    let cov = report.cov_blocks();
    let t0 = report.times[0];
    let span = report.times.last().unwrap() - t0;
    let tq = Instant::now();
    for k in 0..queries {
        // Irrational stride keeps queries off the knots.
        let t = t0 + span * ((k as f64 * 0.381_966_011) % 1.0);
        gpinterp::query_mean(&prior, &report.knots, t).map_err(|e| e.to_string())?;
        gpinterp::query_cov(&prior, &cov, t).map_err(|e| e.to_string())?;
    }
    let per_query_s = tq.elapsed().as_secs_f64() / queries as f64;

    Ok(BenchRow {
        solver: solver.to_string(),
        n,
        kernel_build_s,
        per_iter_solve_s,
        per_query_s,
        total_s: start.elapsed().as_secs_f64(),
        iterations: report.iterations,
    })
}

fn ls_slope(pts: &[(f64, f64)]) -> f64 {
    let m = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (m * sxy - sx * sy) / (m * sxx - sx * sx)
}
