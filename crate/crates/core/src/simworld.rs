//! Seeded 2D robot world: trajectories drawn from the motion priors, a
//! landmark forest, noisy odometry/range-bearing logs, and the dataset file
//! formats.
//!
//! All randomness comes from labeled ChaCha substreams of one seed, so a
//! sweep that changes, say, the range-measurement interval reuses the exact
//! same trajectory and landmark layout.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix2, Vector2, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{
    measure_odometry, measure_range_bearing, BearingFrame, MeasurementKind, MeasurementLog,
    MeasurementRecord,
};
use crate::priors::{
    body_dynamics, noise_block, transition, IntegrationConfig, OpTrajectory, PriorKind,
    PriorModel, Vec6,
};

const LOG_FORMAT: &str = "steamgp-log";
const LOG_VERSION: u64 = 1;

/// RNG substream labels; one label per independent noise source.
mod stream {
    pub const TRAJECTORY: u64 = 0;
    pub const LANDMARKS: u64 = 1;
    pub const ODOM_NOISE: u64 = 2;
    pub const RB_NOISE: u64 = 3;
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("unsupported log format/version: {found}")]
    VersionMismatch { found: String },
    #[error("records out of time order at line {line}")]
    SortOrder { line: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    /// Trajectory length, seconds.
    pub duration: f64,
    /// Knot rate, Hz (measurement-time density of the nominal estimator).
    pub knot_rate: f64,
    pub landmark_count: usize,
    /// Landmarks are placed uniformly in [-half_extent, half_extent]^2.
    pub half_extent: f64,
    pub odom_rate: f64,
    /// Seconds between range/bearing epochs.
    pub rb_interval: f64,
    pub max_range: f64,
    pub sigma_v: f64,
    pub sigma_omega: f64,
    pub sigma_range: f64,
    pub sigma_bearing: f64,
    pub kind: PriorKind,
    pub qc: Vector3<f64>,
    pub bearing_frame: BearingFrame,
    /// Initial state (velocity convention follows `kind`).
    pub x0: Vec6,
    /// Sampling rate of the written ground-truth CSV, Hz.
    pub truth_rate: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            duration: 200.0,
            knot_rate: 1.0,
            landmark_count: 17,
            half_extent: 10.0,
            odom_rate: 1.0,
            rb_interval: 1.0,
            max_range: 30.0,
            sigma_v: 0.02,
            sigma_omega: 0.01,
            sigma_range: 0.05,
            sigma_bearing: 0.5f64.to_radians(),
            kind: PriorKind::LtiConstVel,
            qc: Vector3::new(0.01, 0.01, 0.005),
            bearing_frame: BearingFrame::World,
            x0: Vec6::new(0.0, 0.0, 0.0, 0.3, 0.0, 0.05),
            truth_rate: 10.0,
        }
    }
}

impl WorldConfig {
    fn validate(&self) -> Result<(), SimError> {
        if self.duration <= 0.0 || self.knot_rate <= 0.0 || self.odom_rate <= 0.0 {
            return Err(SimError::InvalidConfig(
                "duration and rates must be positive".into(),
            ));
        }
        if self.rb_interval <= 0.0 || self.truth_rate <= 0.0 {
            return Err(SimError::InvalidConfig(
                "rb_interval and truth_rate must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn model(&self) -> PriorModel {
        PriorModel::new(self.kind, self.qc)
    }

    /// Fine simulation step: 1/100 of the knot interval.
    fn fine_step(&self) -> f64 {
        1.0 / (self.knot_rate * 100.0)
    }

    fn rng(&self, label: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(label);
        rng
    }
}

/// Fine-grid trajectory plus landmark layout.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Uniform fine-grid times from 0 to the duration.
    pub times: Vec<f64>,
    pub states: Vec<Vec6>,
    pub landmarks: Vec<Vector2<f64>>,
}

impl GroundTruth {
    /// State at an arbitrary time: exact at grid points, linear in between.
    pub fn state_at(&self, t: f64) -> Vec6 {
        let n = self.times.len();
        let i = self.times.partition_point(|&x| x < t);
        if i == 0 {
            return self.states[0];
        }
        if i >= n {
            return self.states[n - 1];
        }
        if (self.times[i] - t).abs() <= 1e-9 {
            return self.states[i];
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let a = (t - t0) / (t1 - t0);
        self.states[i - 1] * (1.0 - a) + self.states[i] * a
    }

    pub fn pose_at(&self, t: f64) -> Vector3<f64> {
        let x = self.state_at(t);
        Vector3::new(x[0], x[1], x[2])
    }
}

/// Draws the trajectory and landmark forest for the configured world.
pub fn sample_trajectory(cfg: &WorldConfig) -> Result<GroundTruth, SimError> {
    cfg.validate()?;
    let h = cfg.fine_step();
    let n = (cfg.duration / h).round() as usize;
    let times: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
    let mut rng = cfg.rng(stream::TRAJECTORY);
    let mut states = Vec::with_capacity(n + 1);
    states.push(cfg.x0);
    match cfg.kind {
        PriorKind::NtvBodyConstVel => {
            // Euler-Maruyama on the body-frame SDE at the fine step.
            let sq = cfg.qc.map(|q| (q / h).sqrt() * h);
            for i in 0..n {
                let x = states[i];
                let mut next = x + body_dynamics(&x) * h;
                for k in 0..3 {
                    next[k + 3] += sq[k] * rng.sample::<f64, _>(StandardNormal);
                }
                states.push(next);
            }
        }
        _ => {
            // The discrete recursion is the exact SDE solution for the
            // linear priors.
            let model = cfg.model();
            let op = OpTrajectory::Constant(Vec6::zeros());
            let integ = IntegrationConfig::default();
            let phi = transition(&model, &op, h, 0.0, &integ)
                .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
            let (q, _) = noise_block(&model, &op, 0.0, h, &integ)
                .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
            let l = nalgebra::Cholesky::new(q)
                .ok_or_else(|| SimError::InvalidConfig("Q_C not positive definite".into()))?
                .l();
            for i in 0..n {
                let xi = Vec6::from_fn(|_, _| rng.sample(StandardNormal));
                states.push(phi * states[i] + l * xi);
            }
        }
    }
    let landmarks = place_landmarks(cfg);
    Ok(GroundTruth { times, states, landmarks })
}

/// Uniform landmarks with 0.5 m minimum mutual separation, by rejection.
fn place_landmarks(cfg: &WorldConfig) -> Vec<Vector2<f64>> {
    let mut rng = cfg.rng(stream::LANDMARKS);
    let mut out: Vec<Vector2<f64>> = Vec::with_capacity(cfg.landmark_count);
    let e = cfg.half_extent;
    while out.len() < cfg.landmark_count {
        let cand = Vector2::new(rng.gen_range(-e..e), rng.gen_range(-e..e));
        if out.iter().all(|l| (l - cand).norm() >= 0.5) {
            out.push(cand);
        }
    }
    out
}

/// Generates the noisy measurement log for a sampled world.
pub fn generate_measurements(
    truth: &GroundTruth,
    cfg: &WorldConfig,
) -> Result<MeasurementLog, SimError> {
    cfg.validate()?;
    let mut odom_rng = cfg.rng(stream::ODOM_NOISE);
    let mut rb_rng = cfg.rng(stream::RB_NOISE);
    let odom_cov =
        Matrix2::from_diagonal(&Vector2::new(cfg.sigma_v.powi(2), cfg.sigma_omega.powi(2)));
    let rb_cov = Matrix2::from_diagonal(&Vector2::new(
        cfg.sigma_range.powi(2),
        cfg.sigma_bearing.powi(2),
    ));
    let n_odom = (cfg.duration * cfg.odom_rate + 1e-9).floor() as usize;
    let odom_times: Vec<f64> = (0..=n_odom).map(|k| k as f64 / cfg.odom_rate).collect();
    let n_rb = (cfg.duration / cfg.rb_interval + 1e-9).floor() as usize;
    let rb_times: Vec<f64> = (1..=n_rb).map(|k| k as f64 * cfg.rb_interval).collect();

    let mut records = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < odom_times.len() || j < rb_times.len() {
        let take_odom = j >= rb_times.len()
            || (i < odom_times.len() && odom_times[i] <= rb_times[j] + 1e-12);
        if take_odom {
            let t = odom_times[i];
            i += 1;
            let x = truth.state_at(t);
            let (mut val, _) = measure_odometry(&x, &cfg.kind);
            val.x += cfg.sigma_v * odom_rng.sample::<f64, _>(StandardNormal);
            val.y += cfg.sigma_omega * odom_rng.sample::<f64, _>(StandardNormal);
            records.push(MeasurementRecord {
                t,
                kind: MeasurementKind::Odometry,
                val,
                cov: odom_cov,
            });
        } else {
            let t = rb_times[j];
            j += 1;
            let pose = truth.pose_at(t);
            for (id, lm) in truth.landmarks.iter().enumerate() {
                if (lm - pose.xy()).norm() > cfg.max_range {
                    continue;
                }
                let (mut val, _, _) = measure_range_bearing(&pose, lm, cfg.bearing_frame)
                    .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
                val.x += cfg.sigma_range * rb_rng.sample::<f64, _>(StandardNormal);
                val.y += cfg.sigma_bearing * rb_rng.sample::<f64, _>(StandardNormal);
                records.push(MeasurementRecord {
                    t,
                    kind: MeasurementKind::RangeBearing { landmark: id },
                    val,
                    cov: rb_cov,
                });
            }
        }
    }
    Ok(MeasurementLog { records })
}

/// Samples a world and its measurement log in one call.
pub fn simulate(cfg: &WorldConfig) -> Result<(GroundTruth, MeasurementLog), SimError> {
    let truth = sample_trajectory(cfg)?;
    let log = generate_measurements(&truth, cfg)?;
    Ok((truth, log))
}

// ---------------------------------------------------------------------------
// File formats.

#[derive(Serialize, Deserialize)]
struct LogHeader {
    format: String,
    version: u64,
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    t: f64,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    lm: Option<usize>,
    val: [f64; 2],
    /// Symmetric 2x2 as [r11, r12, r22].
    cov: [f64; 3],
}

/// Writes the measurement log as JSON Lines with a version header.
pub fn save_log(path: &Path, log: &MeasurementLog) -> Result<(), SimError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let header = LogHeader { format: LOG_FORMAT.into(), version: LOG_VERSION };
    writeln!(w, "{}", serde_json::to_string(&header).unwrap())?;
    for r in &log.records {
        let (kind, lm) = match r.kind {
            MeasurementKind::Odometry => ("odom", None),
            MeasurementKind::RangeBearing { landmark } => ("rb", Some(landmark)),
        };
        let line = LogLine {
            t: r.t,
            kind: kind.into(),
            lm,
            val: [r.val.x, r.val.y],
            cov: [r.cov[(0, 0)], r.cov[(0, 1)], r.cov[(1, 1)]],
        };
        writeln!(w, "{}", serde_json::to_string(&line).unwrap())?;
    }
    Ok(())
}

pub fn load_log(path: &Path) -> Result<MeasurementLog, SimError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or(SimError::ParseError { line: 1, reason: "empty file".into() })?;
    let header: LogHeader = serde_json::from_str(&first?)
        .map_err(|e| SimError::ParseError { line: 1, reason: e.to_string() })?;
    if header.format != LOG_FORMAT || header.version != LOG_VERSION {
        return Err(SimError::VersionMismatch {
            found: format!("{} v{}", header.format, header.version),
        });
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let parsed: LogLine = serde_json::from_str(&text)
            .map_err(|e| SimError::ParseError { line: lineno, reason: e.to_string() })?;
        let kind = match parsed.kind.as_str() {
            "odom" => MeasurementKind::Odometry,
            "rb" => MeasurementKind::RangeBearing {
                landmark: parsed.lm.ok_or(SimError::ParseError {
                    line: lineno,
                    reason: "rb record without lm".into(),
                })?,
            },
            other => {
                return Err(SimError::ParseError {
                    line: lineno,
                    reason: format!("unknown kind {other:?}"),
                })
            }
        };
        if let Some(prev) = records.last() {
            let prev: &MeasurementRecord = prev;
            if parsed.t < prev.t {
                return Err(SimError::SortOrder { line: lineno });
            }
        }
        records.push(MeasurementRecord {
            t: parsed.t,
            kind,
            val: Vector2::new(parsed.val[0], parsed.val[1]),
            cov: Matrix2::new(parsed.cov[0], parsed.cov[1], parsed.cov[1], parsed.cov[2]),
        });
    }
    Ok(MeasurementLog { records })
}

/// Ground-truth CSV at the configured truth rate, plus the landmark table.
pub fn save_truth(dir: &Path, truth: &GroundTruth, cfg: &WorldConfig) -> Result<(), SimError> {
    let vel_desc = match cfg.kind {
        PriorKind::NtvBodyConstVel => "body velocity (v_long, v_lat, omega)",
        _ => "inertial rates (xdot, ydot, thetadot)",
    };
    let mut w = BufWriter::new(fs::File::create(dir.join("truth.csv"))?);
    writeln!(w, "# vel columns: {vel_desc}")?;
    writeln!(w, "t,x,y,theta,vel1,vel2,vel3")?;
    let n = (cfg.duration * cfg.truth_rate).round() as usize;
    for k in 0..=n {
        let t = k as f64 / cfg.truth_rate;
        let x = truth.state_at(t);
        writeln!(w, "{},{},{},{},{},{},{}", t, x[0], x[1], x[2], x[3], x[4], x[5])?;
    }
    let mut w = BufWriter::new(fs::File::create(dir.join("landmarks.csv"))?);
    writeln!(w, "id,x,y")?;
    for (id, lm) in truth.landmarks.iter().enumerate() {
        writeln!(w, "{},{},{}", id, lm.x, lm.y)?;
    }
    Ok(())
}

/// Reads a ground-truth CSV (any sampling rate) back into a `GroundTruth`
/// with an empty landmark list.
pub fn load_truth(path: &Path) -> Result<GroundTruth, SimError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut times = Vec::new();
    let mut states = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let text = line?;
        let trimmed = text.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with('t') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 7 {
            return Err(SimError::ParseError {
                line: lineno,
                reason: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let mut v = [0.0; 7];
        for (k, f) in fields.iter().enumerate() {
            v[k] = f.parse().map_err(|e| SimError::ParseError {
                line: lineno,
                reason: format!("{e}"),
            })?;
        }
        if let Some(&prev) = times.last() {
            if v[0] <= prev {
                return Err(SimError::SortOrder { line: lineno });
            }
        }
        times.push(v[0]);
        states.push(Vec6::new(v[1], v[2], v[3], v[4], v[5], v[6]));
    }
    if times.len() < 2 {
        return Err(SimError::ParseError { line: 1, reason: "truth needs >= 2 rows".into() });
    }
    Ok(GroundTruth { times, states, landmarks: Vec::new() })
}

pub fn load_landmarks(path: &Path) -> Result<Vec<Vector2<f64>>, SimError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let text = line?;
        let trimmed = text.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with("id") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 3 {
            return Err(SimError::ParseError {
                line: lineno,
                reason: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let id: usize = fields[0].parse().map_err(|e| SimError::ParseError {
            line: lineno,
            reason: format!("{e}"),
        })?;
        if id != out.len() {
            return Err(SimError::ParseError {
                line: lineno,
                reason: format!("landmark ids must be dense, got {id}"),
            });
        }
        let x: f64 = fields[1].parse().map_err(|e| SimError::ParseError {
            line: lineno,
            reason: format!("{e}"),
        })?;
        let y: f64 = fields[2].parse().map_err(|e| SimError::ParseError {
            line: lineno,
            reason: format!("{e}"),
        })?;
        out.push(Vector2::new(x, y));
    }
    Ok(out)
}

/// Writes log.jsonl, truth.csv, landmarks.csv, and config.json into `dir`.
pub fn save_dataset(
    dir: &Path,
    truth: &GroundTruth,
    log: &MeasurementLog,
    cfg: &WorldConfig,
) -> Result<(), SimError> {
    fs::create_dir_all(dir)?;
    save_log(&dir.join("log.jsonl"), log)?;
    save_truth(dir, truth, cfg)?;
    let f = fs::File::create(dir.join("config.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), cfg)
        .map_err(|e| SimError::ParseError { line: 0, reason: e.to_string() })?;
    Ok(())
}

/// Loads a dataset directory written by `save_dataset`.
pub fn load_dataset(
    dir: &Path,
) -> Result<(GroundTruth, MeasurementLog, WorldConfig), SimError> {
    let log = load_log(&dir.join("log.jsonl"))?;
    let mut truth = load_truth(&dir.join("truth.csv"))?;
    truth.landmarks = load_landmarks(&dir.join("landmarks.csv"))?;
    let f = fs::File::open(dir.join("config.json"))?;
    let cfg: WorldConfig = serde_json::from_reader(BufReader::new(f))
        .map_err(|e| SimError::ParseError { line: 0, reason: e.to_string() })?;
    Ok((truth, log, cfg))
}
