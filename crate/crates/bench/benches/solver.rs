//! Criterion microbenchmarks for the hot paths: prior construction, one
//! sparse solve, and constant-time queries. The end-to-end complexity sweep
//! lives in the CLI `bench` subcommand.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use steamgp::gpinterp;
use steamgp::priors::{build_prior, FirstKnot, IntegrationConfig, Mat6, OpTrajectory, Vec6};
use steamgp::simworld::{self, WorldConfig};
use steamgp::{PriorKind, SteamProblem};

fn world(n: usize, kind: PriorKind) -> WorldConfig {
    WorldConfig {
        seed: 7,
        duration: n as f64,
        landmark_count: 5,
        max_range: 1e12,
        kind,
        ..WorldConfig::default()
    }
}

fn bench_prior_build(c: &mut Criterion) {
    let mut group = c.benchmark_group("prior_build");
    for n in [100usize, 400] {
        let times: Vec<f64> = (0..=n).map(|k| k as f64).collect();
        for kind in [PriorKind::LtiConstVel, PriorKind::NtvBodyConstVel] {
            let model = world(n, kind).model();
            let op = if kind.is_nonlinear() {
                OpTrajectory::DeadReckon {
                    times: times.clone(),
                    knots: vec![Vec6::new(0.0, 0.0, 0.0, 0.3, 0.0, 0.05); times.len()],
                }
            } else {
                OpTrajectory::Constant(Vec6::zeros())
            };
            let label = format!("{kind:?}/{n}");
            group.bench_function(BenchmarkId::from_parameter(label), |b| {
                b.iter(|| {
                    build_prior(
                        &model,
                        black_box(&times),
                        &op,
                        FirstKnot::Free { x0: Vec6::zeros(), p0: Mat6::identity() },
                        &IntegrationConfig::default(),
                    )
                    .unwrap()
                })
            });
        }
    }
    group.finish();
}

fn bench_sparse_solve(c: &mut Criterion) {
    let cfg = world(200, PriorKind::LtiConstVel);
    let (_truth, log) = simworld::simulate(&cfg).unwrap();
    let problem = SteamProblem::at_measurement_times(
        cfg.model(),
        &log,
        cfg.landmark_count,
        cfg.x0,
        Mat6::identity(),
    );
    c.bench_function("sparse_solve/lti_200", |b| {
        b.iter(|| problem.solve(black_box(&log)).unwrap())
    });
}

fn bench_query(c: &mut Criterion) {
    let cfg = world(200, PriorKind::LtiConstVel);
    let (_truth, log) = simworld::simulate(&cfg).unwrap();
    let problem = SteamProblem::at_measurement_times(
        cfg.model(),
        &log,
        cfg.landmark_count,
        cfg.x0,
        Mat6::identity(),
    );
    let report = problem.solve(&log).unwrap();
    let prior = build_prior(
        &problem.model,
        &report.times,
        &OpTrajectory::Constant(Vec6::zeros()),
        FirstKnot::Free { x0: cfg.x0, p0: Mat6::identity() },
        &IntegrationConfig::default(),
    )
    .unwrap();
    let cov = report.cov_blocks();
    c.bench_function("query/mean_and_cov", |b| {
        let mut t = 0.0f64;
        b.iter(|| {
            t = (t + 13.37) % 199.0;
            let x = gpinterp::query_mean(&prior, &report.knots, black_box(t)).unwrap();
            let p = gpinterp::query_cov(&prior, &cov, black_box(t)).unwrap();
            (x, p)
        })
    });
}

criterion_group!(benches, bench_prior_build, bench_sparse_solve, bench_query);
criterion_main!(benches);
