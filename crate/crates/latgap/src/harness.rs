//! Experiment orchestration: configuration, demonstration generation,
//! latency calibration, the strategy x latency rollout grid, and the
//! summary report with its trend gates.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::executor::{run_episode, EpisodeConfig, ExecConfig, RolloutLog, Strategy};
use crate::geometry::{pose_to_9d, Pose};
use crate::metrics::{MetricsConfig, MetricsReport, Vec3Series};
use crate::policy::{DemoDataset, KnnPolicy};
use crate::sensing::{
    estimate_execution_latency, estimate_observation_latency, remove_idle_segments, resample,
    Observation, ResampleMode,
};
use crate::simworld::{run_demo, ExpertConfig, Plant, SimCellConfig};
use crate::timebase::{DelayedChannel, Duration, Timestamp};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Grid shape, seeding, and output location.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GridParams {
    pub strategies: Vec<String>,
    pub inference_latencies_ms: Vec<u64>,
    pub rollouts_per_cell: usize,
    pub seed: u64,
    pub out_dir: String,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            strategies: Strategy::ALL.iter().map(|s| s.name().to_string()).collect(),
            inference_latencies_ms: vec![100, 300, 500],
            rollouts_per_cell: 20,
            seed: 7,
            out_dir: "runs/default".to_string(),
        }
    }
}

/// Retrieval policy and demo post-processing parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyParams {
    /// Actions predicted per inference.
    pub horizon: usize,
    /// Neighbours blended per retrieval.
    pub k: usize,
    /// Observation/action grid rate, Hz.
    pub grid_hz: f64,
    pub quantile_lo: f64,
    pub quantile_hi: f64,
    /// Demo idle-removal displacement threshold per grid step, m.
    pub idle_eps_m: f64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            horizon: 16,
            k: 5,
            grid_hz: 10.0,
            quantile_lo: 0.01,
            quantile_hi: 0.99,
            idle_eps_m: 1e-4,
        }
    }
}

/// Closed-loop episode parameters shared by every grid cell.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeParams {
    pub command_period_s: f64,
    pub horizon_s: f64,
    pub blocking_exec_count: usize,
    pub completion_fraction: f64,
    pub completion_sustain_s: f64,
    pub post_completion_s: f64,
    /// Start-pose jitter amplitude in x and z per rollout, m.
    pub start_jitter_m: f64,
}

impl Default for EpisodeParams {
    fn default() -> Self {
        EpisodeParams {
            command_period_s: 0.012,
            horizon_s: 60.0,
            blocking_exec_count: 8,
            completion_fraction: 0.02,
            completion_sustain_s: 0.5,
            post_completion_s: 0.6,
            start_jitter_m: 0.002,
        }
    }
}

/// Demonstration-generation parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoParams {
    /// Hard per-demo timeout, s.
    pub horizon_s: f64,
    /// Maximum accepted terminal distance to the goal, m.
    pub goal_tolerance_m: f64,
}

impl Default for DemoParams {
    fn default() -> Self {
        DemoParams {
            horizon_s: 30.0,
            goal_tolerance_m: 0.002,
        }
    }
}

/// Calibration-experiment parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationParams {
    /// Constant speeds for the ramp-alignment experiment, m/s.
    pub ramp_speeds_mps: Vec<f64>,
    pub ramp_duration_s: f64,
    /// Start of the steady-state window used for the fit, s.
    pub ramp_window_s: f64,
    /// Stamped messages sent through the observation channel echo.
    pub echo_samples: usize,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        CalibrationParams {
            ramp_speeds_mps: vec![0.005, 0.01, 0.02, 0.04],
            ramp_duration_s: 6.0,
            ramp_window_s: 2.5,
            echo_samples: 120,
        }
    }
}

/// The whole experiment: scene, expert, policy, episode, grid, metrics,
/// and calibration parameters. Serialized as TOML; every field has a
/// default so partial files work.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub grid: GridParams,
    pub policy: PolicyParams,
    pub episode: EpisodeParams,
    pub demo: DemoParams,
    pub calibration: CalibrationParams,
    pub metrics: MetricsConfig,
    pub cell: SimCellConfig,
    pub expert: ExpertConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            grid: GridParams::default(),
            policy: PolicyParams::default(),
            episode: EpisodeParams::default(),
            demo: DemoParams::default(),
            calibration: CalibrationParams::default(),
            metrics: MetricsConfig::default(),
            cell: SimCellConfig::default(),
            expert: ExpertConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Loads a TOML file over the defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn strategies(&self) -> Result<Vec<Strategy>> {
        self.grid
            .strategies
            .iter()
            .map(|s| {
                s.parse::<Strategy>()
                    .map_err(|e| anyhow::anyhow!("invalid strategy {s:?}: {e}"))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.strategies()?;
        if self.grid.strategies.is_empty() || self.grid.inference_latencies_ms.is_empty() {
            bail!("grid needs at least one strategy and one inference latency");
        }
        if self.grid.rollouts_per_cell == 0 {
            bail!("rollouts_per_cell must be at least 1");
        }
        if self.policy.horizon == 0 || self.policy.k == 0 {
            bail!("policy horizon and k must be at least 1");
        }
        if self.policy.grid_hz <= 0.0 {
            bail!("policy grid rate must be positive");
        }
        if !(0.0 < self.policy.quantile_lo && self.policy.quantile_lo < self.policy.quantile_hi
            && self.policy.quantile_hi < 1.0)
        {
            bail!("normalization quantiles must satisfy 0 < lo < hi < 1");
        }
        if self.demo.horizon_s <= 0.0 || self.demo.goal_tolerance_m <= 0.0 {
            bail!("demo horizon and goal tolerance must be positive");
        }
        if self.calibration.ramp_speeds_mps.is_empty()
            || self.calibration.ramp_speeds_mps.iter().any(|v| *v <= 0.0)
        {
            bail!("calibration needs positive ramp speeds");
        }
        if self.calibration.ramp_window_s >= self.calibration.ramp_duration_s {
            bail!("calibration window must start before the ramp ends");
        }
        if self.calibration.echo_samples == 0 {
            bail!("calibration needs at least one echo sample");
        }
        self.cell
            .geom
            .validate()
            .map_err(|e| anyhow::anyhow!("scene geometry: {e}"))?;
        // Episode parameters are checked by the executor's own validator.
        self.episode_config(Strategy::LatencyAware, 0.0, 0.0)
            .validate()
            .map_err(|e| anyhow::anyhow!("episode parameters: {e}"))?;
        Ok(())
    }

    /// Episode configuration for one grid cell.
    pub fn episode_config(
        &self,
        strategy: Strategy,
        inference_latency_s: f64,
        delta_s: f64,
    ) -> EpisodeConfig {
        EpisodeConfig {
            exec: ExecConfig {
                strategy,
                delta_s,
                dtau_s: 1.0 / self.policy.grid_hz,
                blocking_exec_count: self.episode.blocking_exec_count,
            },
            inference_latency_s,
            command_period_s: self.episode.command_period_s,
            horizon_s: self.episode.horizon_s,
            completion_fraction: self.episode.completion_fraction,
            completion_sustain_s: self.episode.completion_sustain_s,
            post_completion_s: self.episode.post_completion_s,
        }
    }
}

/// FNV-1a hash over the master seed and the cell coordinates, giving each
/// rollout an independent, reproducible stream.
pub fn derive_seed(master: u64, tag: &str, latency_ms: u64, index: u64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    fn eat(mut h: u64, bytes: &[u8]) -> u64 {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
        h
    }
    let mut h = OFFSET;
    h = eat(h, &master.to_le_bytes());
    h = eat(h, tag.as_bytes());
    h = eat(h, &latency_ms.to_le_bytes());
    h = eat(h, &index.to_le_bytes());
    h
}

// ---------------------------------------------------------------------------
// Output layout
// ---------------------------------------------------------------------------

/// Canonical artifact locations under one output root.
#[derive(Clone, Debug)]
pub struct OutPaths {
    pub root: PathBuf,
}

impl OutPaths {
    pub fn new(root: &Path) -> Self {
        OutPaths {
            root: root.to_path_buf(),
        }
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn demos_dir(&self) -> PathBuf {
        self.root.join("demos")
    }

    pub fn demo_file(&self, index: usize) -> PathBuf {
        self.demos_dir().join(format!("demo_{index:03}.jsonl"))
    }

    pub fn normalizer(&self) -> PathBuf {
        self.demos_dir().join("normalizer.json")
    }

    pub fn demo_metrics(&self) -> PathBuf {
        self.demos_dir().join("metrics.csv")
    }

    pub fn calibration(&self) -> PathBuf {
        self.root.join("calibration.json")
    }

    pub fn rollouts_dir(&self) -> PathBuf {
        self.root.join("rollouts")
    }

    pub fn rollout_file(&self, strategy: Strategy, latency_ms: u64, index: usize) -> PathBuf {
        self.rollouts_dir()
            .join(format!("{}_{latency_ms}ms_roll{index:02}.jsonl", strategy.name()))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn progression_dir(&self) -> PathBuf {
        self.root.join("progression")
    }

    pub fn progression_file(&self, strategy: Strategy, latency_ms: u64) -> PathBuf {
        self.progression_dir()
            .join(format!("{}_{latency_ms}ms.csv", strategy.name()))
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.csv")
    }
}

fn write_config_snapshot(cfg: &ExperimentConfig, paths: &OutPaths) -> Result<()> {
    fs::create_dir_all(&paths.root)?;
    fs::write(paths.config_snapshot(), cfg.to_toml()?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Metrics rows and CSV I/O
// ---------------------------------------------------------------------------

pub const METRICS_HEADER: &str = "strategy,inference_latency_ms,seed,duration_s,idle_ratio,contact_force_N,force_smoothness_Nps,motion_smoothness_mps3";

/// One evaluated episode, in the exported CSV column order.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub strategy: String,
    pub inference_latency_ms: u64,
    pub seed: u64,
    pub duration_s: f64,
    pub idle_ratio: f64,
    pub contact_force_n: f64,
    pub force_smoothness_nps: f64,
    pub motion_smoothness_mps3: f64,
}

impl MetricsRow {
    fn from_report(strategy: &str, latency_ms: u64, seed: u64, r: &MetricsReport) -> Self {
        MetricsRow {
            strategy: strategy.to_string(),
            inference_latency_ms: latency_ms,
            seed,
            duration_s: r.duration_s,
            idle_ratio: r.idle_ratio,
            contact_force_n: r.contact_force_rms,
            force_smoothness_nps: r.force_smoothness,
            motion_smoothness_mps3: r.motion_smoothness,
        }
    }

    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.strategy,
            self.inference_latency_ms,
            self.seed,
            self.duration_s,
            self.idle_ratio,
            self.contact_force_n,
            self.force_smoothness_nps,
            self.motion_smoothness_mps3
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            bail!("metrics row needs 8 fields, got {}: {line:?}", f.len());
        }
        Ok(MetricsRow {
            strategy: f[0].to_string(),
            inference_latency_ms: f[1].parse()?,
            seed: f[2].parse()?,
            duration_s: f[3].parse()?,
            idle_ratio: f[4].parse()?,
            contact_force_n: f[5].parse()?,
            force_smoothness_nps: f[6].parse()?,
            motion_smoothness_mps3: f[7].parse()?,
        })
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => bail!("unexpected metrics header {other:?} in {}", path.display()),
    }
    lines.map(MetricsRow::parse).collect()
}

/// Linear-interpolation quantile of an unsorted sample (halfway-rank
/// convention, so q=0.5 averages the middle pair on even counts).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty sample");
    assert!((0.0..=1.0).contains(&q), "quantile level out of range");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let lambda = pos - lo as f64;
    v[lo] + lambda * (v[hi] - v[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

// ---------------------------------------------------------------------------
// Demonstrations
// ---------------------------------------------------------------------------

/// Generates the demonstration set: raw-capture metrics, grid-resampled and
/// idle-trimmed observation files, and the fitted normalizer sidecar.
pub fn cmd_demos(cfg: &ExperimentConfig, paths: &OutPaths) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(paths.demos_dir())?;
    write_config_snapshot(cfg, paths)?;

    let count = cfg.grid.rollouts_per_cell;
    let results: Vec<(Vec<Observation>, MetricsRow)> = (0..count)
        .into_par_iter()
        .map(|i| demo_job(cfg, i))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(count);
    let mut demos = Vec::with_capacity(count);
    for (i, (obs, row)) in results.into_iter().enumerate() {
        let text: String = obs
            .iter()
            .map(|o| serde_json::to_string(o).map(|s| s + "\n"))
            .collect::<std::result::Result<_, _>>()?;
        fs::write(paths.demo_file(i), text)?;
        rows.push(row);
        demos.push(obs);
    }
    write_metrics_csv(&paths.demo_metrics(), &rows)?;

    let dataset = DemoDataset::build(
        &demos,
        cfg.policy.horizon,
        (cfg.policy.quantile_lo, cfg.policy.quantile_hi),
    )?;
    let sidecar = serde_json::to_string_pretty(dataset.normalizer())?;
    fs::write(paths.normalizer(), sidecar)?;

    let durations: Vec<f64> = rows.iter().map(|r| r.duration_s).collect();
    println!(
        "demos: {count} files, median duration {:.2}s, dataset {} ticks",
        median(&durations),
        dataset.len()
    );
    Ok(())
}

fn demo_job(cfg: &ExperimentConfig, index: usize) -> Result<(Vec<Observation>, MetricsRow)> {
    let seed = derive_seed(cfg.grid.seed, "demo", 0, index as u64);
    let run = run_demo(
        &cfg.cell,
        &cfg.expert,
        seed,
        Duration::from_secs(cfg.demo.horizon_s),
    )
    .with_context(|| format!("demo {index} (seed {seed})"))?;

    let goal = cfg.cell.geom.goal_vec();
    let gap = (run.final_position - goal).norm();
    if gap > cfg.demo.goal_tolerance_m {
        bail!(
            "demo {index} (seed {seed}) ended {:.2} mm from the goal (tolerance {:.2} mm)",
            gap * 1e3,
            cfg.demo.goal_tolerance_m * 1e3
        );
    }

    // Raw-capture evaluation: what the cell physically did.
    let positions = Vec3Series::new(
        run.capture.poses.iter().map(|s| s.timestamp.secs()).collect(),
        run.capture.poses.iter().map(|s| s.value.position).collect(),
    )?;
    let forces = Vec3Series::new(
        run.capture.wrenches.iter().map(|s| s.timestamp.secs()).collect(),
        run.capture
            .wrenches
            .iter()
            .map(|s| Vector3::new(s.value[0], s.value[1], s.value[2]))
            .collect(),
    )?;
    let start = run.capture.poses[0].value.position;
    let report = MetricsReport::from_signals(&positions, &forces, &start, &goal, &cfg.metrics)?;
    let row = MetricsRow::from_report("reference", 0, seed, &report);

    // Training view: grid-resampled, idle segments removed.
    let gridded = resample(
        &run.capture.poses,
        &run.capture.wrenches,
        &run.capture.visuals,
        cfg.policy.grid_hz,
        ResampleMode::Interpolating,
    )?;
    let trimmed = remove_idle_segments(&gridded, cfg.policy.idle_eps_m);
    Ok((trimmed, row))
}

/// Reads the demo observation files back, in index order.
pub fn load_demos(cfg: &ExperimentConfig, paths: &OutPaths) -> Result<Vec<Vec<Observation>>> {
    let mut demos = Vec::with_capacity(cfg.grid.rollouts_per_cell);
    for i in 0..cfg.grid.rollouts_per_cell {
        let path = paths.demo_file(i);
        let text = fs::read_to_string(&path).with_context(|| {
            format!("missing demo file {} (run the demos command first)", path.display())
        })?;
        let mut obs = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            obs.push(serde_json::from_str::<Observation>(line)?);
        }
        if obs.is_empty() {
            bail!("demo file {} is empty", path.display());
        }
        demos.push(obs);
    }
    Ok(demos)
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// Latencies measured against the configured cell, persisted for runs.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// Composite command-to-motion lag from ramp alignment, s.
    pub execution_latency_s: f64,
    /// Transport delay of the observation channel from stamped echoes, s.
    pub observation_latency_s: f64,
}

/// Runs both calibration experiments against the configured cell.
pub fn calibrate(cfg: &ExperimentConfig) -> Result<CalibrationReport> {
    let dt = cfg.episode.command_period_s;
    let steps = (cfg.calibration.ramp_duration_s / dt).ceil() as u64;
    let mut estimates = Vec::new();
    for &v in &cfg.calibration.ramp_speeds_mps {
        let origin = pose_to_9d(&Pose::from_position(Vector3::zeros()));
        let mut plant = Plant::new(cfg.cell.plant, &origin, Timestamp::ZERO);
        let mut commanded = Vec::new();
        let mut tracked = Vec::new();
        for k in 0..steps {
            let t = k as f64 * dt;
            plant.advance_to(Timestamp::from_secs(t), None);
            let mut sp = origin;
            sp.position.x = v * t;
            plant.send_command(Timestamp::from_secs(t), &sp);
            if t >= cfg.calibration.ramp_window_s {
                commanded.push((t, v * t));
                tracked.push((t, plant.position().x));
            }
        }
        estimates.push(estimate_execution_latency(&commanded, &tracked)?.secs());
    }
    let execution_latency_s = median(&estimates);

    // Echo stamped messages through a channel with the camera's transport
    // delay; the receiver records delivery times.
    let mut channel: DelayedChannel<Timestamp> =
        DelayedChannel::new(Duration::from_secs(cfg.cell.camera_delay_s));
    let mut pairs = Vec::with_capacity(cfg.calibration.echo_samples);
    for j in 0..cfg.calibration.echo_samples {
        let t = Timestamp::from_secs(j as f64 * cfg.cell.camera_period_s);
        channel.send(t, t);
    }
    let drain_at = Timestamp::from_secs(
        cfg.calibration.echo_samples as f64 * cfg.cell.camera_period_s
            + cfg.cell.camera_delay_s
            + 1.0,
    );
    for (received, emitted) in channel.poll_entries(drain_at) {
        pairs.push((emitted, received));
    }
    let observation_latency_s = estimate_observation_latency(&pairs)?.secs();

    Ok(CalibrationReport {
        execution_latency_s,
        observation_latency_s,
    })
}

/// Runs calibration and persists the report.
pub fn cmd_calibrate(cfg: &ExperimentConfig, paths: &OutPaths) -> Result<CalibrationReport> {
    cfg.validate()?;
    let report = calibrate(cfg)?;
    fs::create_dir_all(&paths.root)?;
    fs::write(paths.calibration(), serde_json::to_string_pretty(&report)?)?;
    println!(
        "calibration: execution latency {:.4}s, observation latency {:.4}s",
        report.execution_latency_s, report.observation_latency_s
    );
    Ok(report)
}

fn load_or_run_calibration(cfg: &ExperimentConfig, paths: &OutPaths) -> Result<CalibrationReport> {
    let path = paths.calibration();
    if path.exists() {
        let text = fs::read_to_string(&path)?;
        Ok(serde_json::from_str(&text)?)
    } else {
        cmd_calibrate(cfg, paths)
    }
}

// ---------------------------------------------------------------------------
// The rollout grid
// ---------------------------------------------------------------------------

/// Executes the full strategy x latency grid against the stored demos and
/// writes logs, per-rollout metrics, progression quantiles, and the summary.
pub fn cmd_run(cfg: &ExperimentConfig, paths: &OutPaths) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let demos = load_demos(cfg, paths)?;
    let demo_rows = read_metrics_csv(&paths.demo_metrics())?;
    let calibration = load_or_run_calibration(cfg, paths)?;

    let dataset = DemoDataset::build(
        &demos,
        cfg.policy.horizon,
        (cfg.policy.quantile_lo, cfg.policy.quantile_hi),
    )?;
    let policy = KnnPolicy::new(dataset, cfg.policy.k);

    fs::create_dir_all(paths.rollouts_dir())?;
    fs::create_dir_all(paths.progression_dir())?;
    write_config_snapshot(cfg, paths)?;

    let strategies = cfg.strategies()?;
    let mut jobs = Vec::new();
    for &strategy in &strategies {
        for &lat in &cfg.grid.inference_latencies_ms {
            for idx in 0..cfg.grid.rollouts_per_cell {
                jobs.push((strategy, lat, idx));
            }
        }
    }

    let started = std::time::Instant::now();
    let outcomes: Vec<(MetricsRow, Vec<(f64, f64)>)> = jobs
        .par_iter()
        .map(|&(strategy, lat, idx)| rollout_job(cfg, paths, &policy, &calibration, strategy, lat, idx))
        .collect::<Result<Vec<_>>>()?;
    let wall = started.elapsed().as_secs_f64();

    let mut rows = Vec::with_capacity(outcomes.len());
    let mut progressions: Vec<Vec<(f64, f64)>> = Vec::with_capacity(outcomes.len());
    for (row, prog) in outcomes {
        rows.push(row);
        progressions.push(prog);
    }
    write_metrics_csv(&paths.metrics(), &rows)?;

    // Progression quantile bands per cell, on the policy grid rate.
    for &strategy in &strategies {
        for &lat in &cfg.grid.inference_latencies_ms {
            let cell: Vec<&Vec<(f64, f64)>> = jobs
                .iter()
                .zip(progressions.iter())
                .filter(|((s, l, _), _)| *s == strategy && *l == lat)
                .map(|(_, p)| p)
                .collect();
            write_progression_bands(
                &paths.progression_file(strategy, lat),
                &cell,
                cfg.policy.grid_hz,
            )?;
        }
    }

    let summary = summarize(&rows, &demo_rows, &strategies, &cfg.grid.inference_latencies_ms)?;
    fs::write(paths.summary(), &summary)?;

    println!(
        "grid: {} rollouts in {wall:.1}s wall, metrics in {}",
        rows.len(),
        paths.metrics().display()
    );
    Ok(rows)
}

fn rollout_job(
    cfg: &ExperimentConfig,
    paths: &OutPaths,
    policy: &KnnPolicy,
    calibration: &CalibrationReport,
    strategy: Strategy,
    latency_ms: u64,
    index: usize,
) -> Result<(MetricsRow, Vec<(f64, f64)>)> {
    let seed = derive_seed(cfg.grid.seed, strategy.name(), latency_ms, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = cfg.episode.start_jitter_m;
    let mut start = Vector3::from_column_slice(&cfg.cell.geom.start);
    start.x += rng.gen_range(-j..=j);
    start.z += rng.gen_range(-j..=j);
    let start_pose = pose_to_9d(&Pose::from_position(start));

    let delta_s = match strategy {
        Strategy::LatencyAware => calibration.execution_latency_s,
        _ => 0.0,
    };
    let ep = cfg.episode_config(strategy, latency_ms as f64 / 1000.0, delta_s);
    let log = run_episode(&cfg.cell, policy, &ep, &start_pose, seed)
        .with_context(|| format!("{} at {latency_ms} ms, rollout {index}", strategy.name()))?;
    log.write_jsonl(&paths.rollout_file(strategy, latency_ms, index))?;

    let report = evaluate_log(&log, &cfg.metrics)?;
    let row = MetricsRow::from_report(strategy.name(), latency_ms, seed, &report);
    Ok((row, report.progression))
}

/// Computes the evaluation report for a recorded rollout from its feedback
/// poses and external wrenches.
pub fn evaluate_log(log: &RolloutLog, metrics: &MetricsConfig) -> Result<MetricsReport> {
    let t: Vec<f64> = log.records.iter().map(|r| r.t).collect();
    let positions = Vec3Series::new(
        t.clone(),
        log.records
            .iter()
            .map(|r| Vector3::new(r.feedback_pose[0], r.feedback_pose[1], r.feedback_pose[2]))
            .collect(),
    )?;
    let forces = Vec3Series::new(
        t,
        log.records
            .iter()
            .map(|r| Vector3::new(r.wrench_ext[0], r.wrench_ext[1], r.wrench_ext[2]))
            .collect(),
    )?;
    let start = Vector3::from_column_slice(&log.meta.start);
    let goal = Vector3::from_column_slice(&log.meta.goal);
    Ok(MetricsReport::from_signals(
        &positions, &forces, &start, &goal, metrics,
    )?)
}

/// Last-value resampling of one progression trace onto the grid, clamped to
/// its final value once the trace ends.
fn progression_on_grid(prog: &[(f64, f64)], hz: f64, ticks: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(ticks);
    let mut i = 0usize;
    for k in 0..ticks {
        let t = k as f64 / hz;
        while i + 1 < prog.len() && prog[i + 1].0 <= t + 1e-12 {
            i += 1;
        }
        out.push(prog[i].1);
    }
    out
}

fn write_progression_bands(
    path: &Path,
    cell: &[&Vec<(f64, f64)>],
    hz: f64,
) -> Result<()> {
    let max_t = cell
        .iter()
        .filter_map(|p| p.last().map(|s| s.0))
        .fold(0.0, f64::max);
    let ticks = (max_t * hz).floor() as usize + 1;
    let mut text = String::from("t_s,p25,p50,p75\n");
    let grids: Vec<Vec<f64>> = cell
        .iter()
        .map(|p| progression_on_grid(p, hz, ticks))
        .collect();
    for k in 0..ticks {
        let at: Vec<f64> = grids.iter().map(|g| g[k]).collect();
        text.push_str(&format!(
            "{},{},{},{}\n",
            k as f64 / hz,
            quantile(&at, 0.25),
            quantile(&at, 0.50),
            quantile(&at, 0.75)
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Summary and report gates
// ---------------------------------------------------------------------------

const SUMMARY_METRICS: [(&str, fn(&MetricsRow) -> f64); 5] = [
    ("duration_s", |r| r.duration_s),
    ("idle_ratio", |r| r.idle_ratio),
    ("contact_force_N", |r| r.contact_force_n),
    ("force_smoothness_Nps", |r| r.force_smoothness_nps),
    ("motion_smoothness_mps3", |r| r.motion_smoothness_mps3),
];

fn cell_rows<'a>(
    rows: &'a [MetricsRow],
    strategy: Strategy,
    latency_ms: u64,
) -> Vec<&'a MetricsRow> {
    rows.iter()
        .filter(|r| r.strategy == strategy.name() && r.inference_latency_ms == latency_ms)
        .collect()
}

fn cell_median(
    rows: &[MetricsRow],
    strategy: Strategy,
    latency_ms: u64,
    value: fn(&MetricsRow) -> f64,
) -> Result<f64> {
    let cell = cell_rows(rows, strategy, latency_ms);
    if cell.is_empty() {
        bail!("no rows for {} at {latency_ms} ms", strategy.name());
    }
    Ok(median(
        &cell.iter().map(|r| value(r)).collect::<Vec<f64>>(),
    ))
}

/// Renders the per-cell median table: one row per metric, one column per
/// cell, plus the demonstration reference column.
pub fn summarize(
    rows: &[MetricsRow],
    demo_rows: &[MetricsRow],
    strategies: &[Strategy],
    latencies: &[u64],
) -> Result<String> {
    if demo_rows.is_empty() {
        bail!("no demonstration metrics to summarize");
    }
    let mut header = String::from("metric,reference");
    for s in strategies {
        for l in latencies {
            header.push_str(&format!(",{}_{l}ms", s.name()));
        }
    }
    let mut text = header;
    text.push('\n');
    for (name, value) in SUMMARY_METRICS {
        let reference = median(&demo_rows.iter().map(value).collect::<Vec<f64>>());
        let mut line = format!("{name},{reference}");
        for &s in strategies {
            for &l in latencies {
                line.push_str(&format!(",{}", cell_median(rows, s, l, value)?));
            }
        }
        text.push_str(&line);
        text.push('\n');
    }
    Ok(text)
}

/// One trend gate: what was checked, whether it held, and the numbers.
#[derive(Clone, Debug)]
pub struct GateOutcome {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn fmt_triple(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.3}"))
        .collect::<Vec<_>>()
        .join("/")
}

/// Evaluates the qualitative orderings the summary must reproduce. Rows are
/// per-rollout; medians are taken per cell.
pub fn evaluate_gates(
    rows: &[MetricsRow],
    demo_rows: &[MetricsRow],
    latencies: &[u64],
    horizon_s: f64,
) -> Result<Vec<GateOutcome>> {
    use Strategy::{Blocking, LatencyAware, NaiveAsync};
    if demo_rows.is_empty() {
        bail!("no demonstration metrics loaded");
    }
    let mut gates = Vec::new();
    let med = |s: Strategy, l: u64, v: fn(&MetricsRow) -> f64| cell_median(rows, s, l, v);
    let ref_median = |v: fn(&MetricsRow) -> f64| median(&demo_rows.iter().map(v).collect::<Vec<f64>>());

    // Blocking idle grows with inference latency and dwarfs latency-aware
    // idle at the two slower settings.
    {
        let b: Vec<f64> = latencies
            .iter()
            .map(|&l| med(Blocking, l, |r| r.idle_ratio))
            .collect::<Result<_>>()?;
        let a: Vec<f64> = latencies
            .iter()
            .map(|&l| med(LatencyAware, l, |r| r.idle_ratio))
            .collect::<Result<_>>()?;
        let monotone = b.windows(2).all(|w| w[1] > w[0]);
        let slow: Vec<usize> = latencies
            .iter()
            .enumerate()
            .filter(|(_, &l)| l >= 300)
            .map(|(i, _)| i)
            .collect();
        let dominated = slow.iter().all(|&i| b[i] >= 3.0 * a[i]);
        gates.push(GateOutcome {
            name: "blocking-idle-grows-and-dominates",
            pass: monotone && dominated,
            detail: format!("blocking {} vs aware {}", fmt_triple(&b), fmt_triple(&a)),
        });
    }

    // Latency-aware duration is flat across latencies and close to the
    // demonstrations.
    {
        let d: Vec<f64> = latencies
            .iter()
            .map(|&l| med(LatencyAware, l, |r| r.duration_s))
            .collect::<Result<_>>()?;
        let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let flat = (hi - lo) / lo < 0.15;
        let reference = ref_median(|r| r.duration_s);
        let close = d
            .iter()
            .all(|x| (x - reference).abs() <= 0.30 * reference);
        gates.push(GateOutcome {
            name: "aware-duration-flat-and-near-reference",
            pass: flat && close,
            detail: format!("aware {} vs reference {reference:.3}", fmt_triple(&d)),
        });
    }

    // Naive streaming is rough on contact: higher force level and much
    // higher force slew than latency-aware at every latency.
    {
        let mut pass = true;
        let mut force_ratios = Vec::new();
        let mut slew_ratios = Vec::new();
        for &l in latencies {
            let nf = med(NaiveAsync, l, |r| r.contact_force_n)?;
            let af = med(LatencyAware, l, |r| r.contact_force_n)?;
            let ns = med(NaiveAsync, l, |r| r.force_smoothness_nps)?;
            let as_ = med(LatencyAware, l, |r| r.force_smoothness_nps)?;
            force_ratios.push(nf / af);
            slew_ratios.push(ns / as_);
            if nf < 2.0 * af || ns < 5.0 * as_ {
                pass = false;
            }
        }
        gates.push(GateOutcome {
            name: "naive-contact-rougher-than-aware",
            pass,
            detail: format!(
                "force ratios {} (need >=2), slew ratios {} (need >=5)",
                fmt_triple(&force_ratios),
                fmt_triple(&slew_ratios)
            ),
        });
    }

    // Latency-aware jerk is the closest to the demonstrations everywhere.
    {
        let reference = ref_median(|r| r.motion_smoothness_mps3);
        let mut pass = true;
        let mut detail = Vec::new();
        for &l in latencies {
            let a = (med(LatencyAware, l, |r| r.motion_smoothness_mps3)? - reference).abs();
            let b = (med(Blocking, l, |r| r.motion_smoothness_mps3)? - reference).abs();
            let n = (med(NaiveAsync, l, |r| r.motion_smoothness_mps3)? - reference).abs();
            detail.push(format!("{l}ms |d|=a{a:.3}/b{b:.3}/n{n:.3}"));
            if a > b || a > n {
                pass = false;
            }
        }
        gates.push(GateOutcome {
            name: "aware-jerk-closest-to-reference",
            pass,
            detail: detail.join(", "),
        });
    }

    // Every latency-aware rollout finishes, and its completion times spread
    // less than blocking's.
    {
        let finished = |d: f64| d < horizon_s * 0.999;
        let mut pass = true;
        let mut detail = Vec::new();
        for &l in latencies {
            let aware: Vec<f64> = cell_rows(rows, LatencyAware, l)
                .iter()
                .map(|r| r.duration_s)
                .collect();
            let blocking: Vec<f64> = cell_rows(rows, Blocking, l)
                .iter()
                .map(|r| r.duration_s)
                .collect();
            let all_done = aware.iter().all(|&d| finished(d));
            let a_done: Vec<f64> = aware.iter().copied().filter(|&d| finished(d)).collect();
            let b_done: Vec<f64> = blocking.iter().copied().filter(|&d| finished(d)).collect();
            if a_done.is_empty() || b_done.is_empty() {
                bail!("no completed rollouts to compare at {l} ms");
            }
            let a_spread = quantile(&a_done, 0.75) - quantile(&a_done, 0.25);
            let b_spread = quantile(&b_done, 0.75) - quantile(&b_done, 0.25);
            detail.push(format!(
                "{l}ms spread a{a_spread:.3}/b{b_spread:.3}{}",
                if all_done { "" } else { " (aware timeouts!)" }
            ));
            if !all_done || a_spread >= b_spread {
                pass = false;
            }
        }
        gates.push(GateOutcome {
            name: "aware-always-finishes-with-tighter-spread",
            pass,
            detail: detail.join(", "),
        });
    }

    Ok(gates)
}

/// Reloads stored metrics, reprints the summary, and evaluates the gates.
/// Returns whether every gate passed.
pub fn cmd_report(cfg: &ExperimentConfig, paths: &OutPaths) -> Result<bool> {
    // Prefer the snapshot that produced the stored data.
    let snapshot = paths.config_snapshot();
    let cfg = if snapshot.exists() {
        ExperimentConfig::load(&snapshot)?
    } else {
        cfg.clone()
    };
    let rows = read_metrics_csv(&paths.metrics())?;
    let demo_rows = read_metrics_csv(&paths.demo_metrics())?;
    let strategies = cfg.strategies()?;

    let summary = summarize(&rows, &demo_rows, &strategies, &cfg.grid.inference_latencies_ms)?;
    fs::write(paths.summary(), &summary)?;
    print!("{summary}");

    let gates = evaluate_gates(
        &rows,
        &demo_rows,
        &cfg.grid.inference_latencies_ms,
        cfg.episode.horizon_s,
    )?;
    let mut all = true;
    for g in &gates {
        println!(
            "{} {}: {}",
            if g.pass { "PASS" } else { "FAIL" },
            g.name,
            g.detail
        );
        all &= g.pass;
    }
    Ok(all)
}
