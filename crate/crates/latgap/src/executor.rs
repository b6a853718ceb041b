//! Chunk scheduling strategies and the closed-loop episode driver.
//!
//! A policy emits chunks of time-indexed relative targets. How those
//! targets are stamped and consumed while new inferences are in flight is
//! the whole difference between the three strategies here:
//!
//! * `Blocking` pauses motion during inference, then steps through a fixed
//!   number of entries paced from the completion time before re-inferring.
//! * `NaiveAsync` re-stamps every fresh chunk so its first entry executes
//!   immediately on arrival, ignoring how stale the observation behind it is.
//! * `LatencyAware` keeps the chunk's native observation-anchored
//!   timestamps and selects the entry (interpolated) for `now + delta`,
//!   where `delta` is the calibrated execution latency.

use std::collections::VecDeque;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Pose9D};
use crate::policy::{decode_relative, ActionChunk, KnnPolicy, PolicyError};
use crate::sensing::Observation;
use crate::simworld::{SimCell, SimCellConfig, SimError};
use crate::timebase::{Duration, Timestamp};
use crate::vision::hog_encode;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("log format error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("rollout log is missing its meta line")]
    MissingMeta,
}

/// How chunk execution is scheduled around inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Blocking,
    NaiveAsync,
    LatencyAware,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Blocking, Strategy::NaiveAsync, Strategy::LatencyAware];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Blocking => "blocking",
            Strategy::NaiveAsync => "naive_async",
            Strategy::LatencyAware => "latency_aware",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blocking" => Ok(Strategy::Blocking),
            "naive_async" | "naive-async" => Ok(Strategy::NaiveAsync),
            "latency_aware" | "latency-aware" => Ok(Strategy::LatencyAware),
            other => Err(format!("unknown strategy '{other}'")),
        }
    }
}

/// Scheduling parameters shared by every strategy.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ExecConfig {
    pub strategy: Strategy,
    /// Execution-latency compensation shift, s (zero for the naive mode).
    pub delta_s: f64,
    /// Spacing of chunk entries on the action grid, s.
    pub dtau_s: f64,
    /// Entries executed per chunk in blocking mode before re-inferring.
    pub blocking_exec_count: usize,
}

impl ExecConfig {
    pub fn validate(&self) -> Result<(), ExecError> {
        if self.dtau_s <= 0.0 {
            return Err(ExecError::InvalidConfig("dtau must be positive".into()));
        }
        if self.delta_s < 0.0 {
            return Err(ExecError::InvalidConfig("delta must be non-negative".into()));
        }
        if self.blocking_exec_count == 0 {
            return Err(ExecError::InvalidConfig(
                "blocking_exec_count must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One chunk entry bound to an absolute execution time.
#[derive(Clone, Debug, PartialEq)]
pub struct TimedEntry {
    pub exec_ts: Timestamp,
    pub relative: [f64; 9],
}

/// An action chunk whose entries carry absolute execution timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct TimedActionChunk {
    pub tau_obs: Timestamp,
    pub base: [f64; 9],
    pub entries: VecDeque<TimedEntry>,
}

impl TimedActionChunk {
    /// Native stamping: entry i (1-based) executes at tau_obs + i * dtau,
    /// i.e. on the grid the chunk was predicted for.
    pub fn from_observation_grid(chunk: &ActionChunk, dtau: Duration) -> Self {
        let entries = chunk
            .relative
            .iter()
            .enumerate()
            .map(|(i, rel)| TimedEntry {
                exec_ts: chunk.tau_obs + Duration::from_secs((i + 1) as f64 * dtau.secs()),
                relative: *rel,
            })
            .collect();
        TimedActionChunk {
            tau_obs: chunk.tau_obs,
            base: chunk.base,
            entries,
        }
    }

    /// Arrival re-stamping: entry i (1-based) executes at
    /// arrival + (i - 1) * dtau, so the first entry is due immediately.
    pub fn from_arrival_grid(chunk: &ActionChunk, arrival: Timestamp, dtau: Duration) -> Self {
        let entries = chunk
            .relative
            .iter()
            .enumerate()
            .map(|(i, rel)| TimedEntry {
                exec_ts: arrival + Duration::from_secs(i as f64 * dtau.secs()),
                relative: *rel,
            })
            .collect();
        TimedActionChunk {
            tau_obs: chunk.tau_obs,
            base: chunk.base,
            entries,
        }
    }
}

/// What a buffer selection produced.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectOutcome {
    pub pose: Pose9D,
    /// The timestamp the commanded value corresponds to on the chunk's
    /// grid; None when holding.
    pub effective_ts: Option<Timestamp>,
    /// Entries consumed because a later entry already covers the target.
    pub dropped: usize,
    /// The target preceded the first entry, which was commanded as-is.
    pub clamped: bool,
    /// Nothing applicable was buffered; the previous command was kept.
    pub held: bool,
}

/// Holds the freshest timed chunk and selects the command for a target
/// time, interpolating between bracketing entries in the 9D offset space.
pub struct ActionBuffer {
    chunk: Option<TimedActionChunk>,
    last_commanded: Pose9D,
}

impl ActionBuffer {
    pub fn new(initial: Pose9D) -> Self {
        ActionBuffer {
            chunk: None,
            last_commanded: initial,
        }
    }

    /// Installs a fresh chunk, discarding any previous one.
    pub fn replace(&mut self, chunk: TimedActionChunk) {
        self.chunk = Some(chunk);
    }

    pub fn last_commanded(&self) -> &Pose9D {
        &self.last_commanded
    }

    /// Records a command issued outside the selection machinery (the
    /// blocking strategy steps through entries directly).
    pub fn command_directly(&mut self, pose: Pose9D) {
        self.last_commanded = pose;
    }

    /// (buffered entries, next execution timestamp) for logging.
    pub fn state(&self) -> (usize, Option<Timestamp>) {
        match &self.chunk {
            Some(c) => (c.entries.len(), c.entries.front().map(|e| e.exec_ts)),
            None => (0, None),
        }
    }

    /// Selects the command for `target` time: consumes entries superseded
    /// by a later one that is also due, interpolates the 9D offset between
    /// the bracketing entries, clamps to the earliest entry if the target
    /// precedes the whole chunk, and holds the previous command if the
    /// chunk is exhausted or absent.
    pub fn select(&mut self, target: Timestamp) -> Result<SelectOutcome, GeometryError> {
        let hold = |last: &Pose9D, dropped: usize| SelectOutcome {
            pose: *last,
            effective_ts: None,
            dropped,
            clamped: false,
            held: true,
        };

        let Some(chunk) = self.chunk.as_mut() else {
            return Ok(hold(&self.last_commanded, 0));
        };

        let mut dropped = 0;
        while chunk.entries.len() >= 2 && chunk.entries[1].exec_ts <= target {
            chunk.entries.pop_front();
            dropped += 1;
        }

        let first = chunk.entries.front().expect("chunks are never empty");
        let outcome = if target < first.exec_ts {
            SelectOutcome {
                pose: decode_relative(&chunk.base, &first.relative)?,
                effective_ts: Some(first.exec_ts),
                dropped,
                clamped: true,
                held: false,
            }
        } else if chunk.entries.len() == 1 {
            if target == first.exec_ts {
                SelectOutcome {
                    pose: decode_relative(&chunk.base, &first.relative)?,
                    effective_ts: Some(target),
                    dropped,
                    clamped: false,
                    held: false,
                }
            } else {
                // Past the last entry: the chunk is exhausted.
                self.chunk = None;
                return Ok(hold(&self.last_commanded, dropped));
            }
        } else {
            let a = &chunk.entries[0];
            let b = &chunk.entries[1];
            let lambda = (target - a.exec_ts) / (b.exec_ts - a.exec_ts);
            let mut offset = [0.0; 9];
            for i in 0..9 {
                offset[i] = (1.0 - lambda) * a.relative[i] + lambda * b.relative[i];
            }
            SelectOutcome {
                pose: decode_relative(&chunk.base, &offset)?,
                effective_ts: Some(target),
                dropped,
                clamped: false,
                held: false,
            }
        };
        self.last_commanded = outcome.pose;
        Ok(outcome)
    }
}

// ---------------------------------------------------------------------------
// Episode driver
// ---------------------------------------------------------------------------

/// Everything a closed-loop episode needs beyond the cell and the policy.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub exec: ExecConfig,
    /// Simulated inference latency, s.
    pub inference_latency_s: f64,
    /// Command (and cycle) period, s.
    pub command_period_s: f64,
    /// Hard episode timeout, s.
    pub horizon_s: f64,
    /// Progress fraction below which the task counts as done.
    pub completion_fraction: f64,
    /// How long the fraction must stay below threshold, s.
    pub completion_sustain_s: f64,
    /// Extra time recorded after completion so offline metrics can confirm
    /// the sustained arrival from the log alone, s.
    pub post_completion_s: f64,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), ExecError> {
        self.exec.validate()?;
        if self.command_period_s <= 0.0 || self.horizon_s <= 0.0 {
            return Err(ExecError::InvalidConfig(
                "command period and horizon must be positive".into(),
            ));
        }
        if self.inference_latency_s < 0.0 {
            return Err(ExecError::InvalidConfig(
                "inference latency must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.completion_fraction) {
            return Err(ExecError::InvalidConfig(
                "completion fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// First line of a rollout log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RolloutMeta {
    pub strategy: Strategy,
    pub inference_latency_s: f64,
    pub delta_s: f64,
    pub dtau_s: f64,
    pub command_period_s: f64,
    pub seed: u64,
    pub start: [f64; 3],
    pub goal: [f64; 3],
    pub completed: bool,
    pub duration_s: f64,
}

/// Buffer occupancy snapshot stored with each record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BufferState {
    pub size: usize,
    pub next_exec_ts: Option<f64>,
}

/// One cycle of a rollout log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub t: f64,
    pub commanded_pose: [f64; 9],
    pub feedback_pose: [f64; 9],
    pub wrench_ext: [f64; 6],
    pub buffer: BufferState,
    pub selected_exec_ts: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
}

/// A whole rollout: meta line plus one record per command cycle.
#[derive(Clone, Debug)]
pub struct RolloutLog {
    pub meta: RolloutMeta,
    pub records: Vec<RolloutRecord>,
}

impl RolloutLog {
    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<(), ExecError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut f, &self.meta)?;
        f.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &std::path::Path) -> Result<Self, ExecError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let meta_line = lines.next().ok_or(ExecError::MissingMeta)??;
        let meta: RolloutMeta = serde_json::from_str(&meta_line)?;
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(RolloutLog { meta, records })
    }
}

/// Event labels, listed in descending priority for the single event slot.
const EV_INFERENCE_DONE: &str = "inference_done";
const EV_INFERENCE_START: &str = "inference_start";
const EV_STALE_DROP: &str = "stale_drop";
const EV_HOLD: &str = "hold";

fn set_event(slot: &mut Option<String>, label: &str) {
    let rank = |l: &str| match l {
        EV_INFERENCE_DONE => 0,
        EV_INFERENCE_START => 1,
        EV_STALE_DROP => 2,
        _ => 3,
    };
    if slot.as_deref().map_or(true, |cur| rank(label) < rank(cur)) {
        *slot = Some(label.to_string());
    }
}

fn assemble_observation(cell: &SimCell) -> Result<Option<Observation>, ExecError> {
    let (Some((pt, pose)), Some((_, wrench)), Some((_, frame))) =
        (cell.latest_pose(), cell.latest_wrench(), cell.latest_frame())
    else {
        return Ok(None);
    };
    let visual = hog_encode(frame, cell.hog_params())
        .map_err(|e| ExecError::InvalidConfig(format!("camera encoding failed: {e}")))?;
    Ok(Some(Observation {
        tau_obs: *pt,
        pose9d: pose.as_array(),
        wrench: *wrench,
        visual,
    }))
}

struct PendingInference {
    done_at: Timestamp,
    chunk: ActionChunk,
}

enum BlockingState {
    Idle,
    Inferring { done_at: Timestamp, chunk: ActionChunk },
    Executing { poses: Vec<Pose9D>, paced_from: Timestamp, next: usize },
}

/// Runs one closed-loop episode of the policy on a fresh cell and returns
/// the cycle-by-cycle log. Deterministic in all inputs.
pub fn run_episode(
    cell_cfg: &SimCellConfig,
    policy: &KnnPolicy,
    ep: &EpisodeConfig,
    start_pose: &Pose9D,
    seed: u64,
) -> Result<RolloutLog, ExecError> {
    ep.validate()?;
    cell_cfg.geom.validate()?;

    let mut cell = SimCell::new(cell_cfg.clone(), start_pose, Timestamp::ZERO, false);
    let mut buffer = ActionBuffer::new(*start_pose);
    let dtau = Duration::from_secs(ep.exec.dtau_s);
    let delta = Duration::from_secs(ep.exec.delta_s);
    let il = Duration::from_secs(ep.inference_latency_s);

    let goal = cell_cfg.geom.goal_vec();
    let start = start_pose.position;
    let denom = (start - goal).norm();
    if denom <= 0.0 {
        return Err(ExecError::InvalidConfig("start coincides with goal".into()));
    }

    let mut records = Vec::new();
    let mut pending: Option<PendingInference> = None;
    let mut blocking = BlockingState::Idle;
    let mut below_since: Option<Timestamp> = None;
    let mut completed_at: Option<Timestamp> = None;
    let mut stop_at: Option<Timestamp> = None;

    let mut cycle: u64 = 0;
    let final_t;
    loop {
        let t = Timestamp::ZERO + Duration::from_secs(cycle as f64 * ep.command_period_s);
        if t.secs() > ep.horizon_s {
            final_t = Timestamp::from_secs(ep.horizon_s);
            break;
        }
        if let Some(stop) = stop_at {
            if t > stop {
                final_t = stop;
                break;
            }
        }

        cell.advance_to(t);
        let mut event: Option<String> = None;
        let mut trace: Option<String> = None; // TEMP diagnostic
        let mut selected: Option<Timestamp> = None;
        let commanded: Pose9D;

        match ep.exec.strategy {
            Strategy::Blocking => {
                // Hold during inference; on completion, step through the
                // first `blocking_exec_count` entries paced by dtau from the
                // completion time, then re-infer.
                loop {
                    match std::mem::replace(&mut blocking, BlockingState::Idle) {
                        BlockingState::Idle => {
                            if let Some(obs) = assemble_observation(&cell)? {
                                let chunk = policy.infer(&obs)?;
                                blocking = BlockingState::Inferring { done_at: t + il, chunk };
                                set_event(&mut event, EV_INFERENCE_START);
                                continue;
                            }
                            break;
                        }
                        BlockingState::Inferring { done_at, chunk } => {
                            if done_at <= t {
                                let n = ep.exec.blocking_exec_count.min(chunk.horizon());
                                let poses = (0..n)
                                    .map(|i| chunk.target_pose(i))
                                    .collect::<Result<Vec<_>, _>>()?;
                                blocking = BlockingState::Executing {
                                    poses,
                                    paced_from: done_at,
                                    next: 0,
                                };
                                set_event(&mut event, EV_INFERENCE_DONE);
                                continue;
                            }
                            blocking = BlockingState::Inferring { done_at, chunk };
                            break;
                        }
                        BlockingState::Executing { poses, paced_from, mut next } => {
                            if next >= poses.len() {
                                let resume = paced_from
                                    + Duration::from_secs(poses.len() as f64 * dtau.secs());
                                if t >= resume {
                                    blocking = BlockingState::Idle;
                                    continue;
                                }
                                blocking = BlockingState::Executing { poses, paced_from, next };
                                break;
                            }
                            let due = paced_from + Duration::from_secs(next as f64 * dtau.secs());
                            if t >= due {
                                buffer.command_directly(poses[next]);
                                next += 1;
                            }
                            blocking = BlockingState::Executing { poses, paced_from, next };
                            break;
                        }
                    }
                }
                commanded = *buffer.last_commanded();
            }
            Strategy::NaiveAsync | Strategy::LatencyAware => {
                // Deliver a finished inference.
                if pending.as_ref().is_some_and(|p| p.done_at <= t) {
                    let p = pending.take().expect("checked above");
                    let timed = match ep.exec.strategy {
                        Strategy::NaiveAsync => {
                            TimedActionChunk::from_arrival_grid(&p.chunk, p.done_at, dtau)
                        }
                        _ => TimedActionChunk::from_observation_grid(&p.chunk, dtau),
                    };
                    buffer.replace(timed);
                    set_event(&mut event, EV_INFERENCE_DONE);
                }
                // Start the next one as soon as the slot is free.
                if pending.is_none() {
                    if let Some(obs) = assemble_observation(&cell)? {
                        let chunk = policy.infer(&obs)?;
                        // TEMP diagnostic: record the retrieved k-set.
                        let nbrs = policy.dataset.nearest_indices(&obs, policy.k)?;
                        pending = Some(PendingInference { done_at: t + il, chunk });
                        set_event(&mut event, EV_INFERENCE_START);
                        trace = Some(format!("inference_start {:?}", nbrs));
                    }
                }
                // A zero-latency inference is usable the same cycle.
                if pending.as_ref().is_some_and(|p| p.done_at <= t) {
                    let p = pending.take().expect("checked above");
                    let timed = match ep.exec.strategy {
                        Strategy::NaiveAsync => {
                            TimedActionChunk::from_arrival_grid(&p.chunk, p.done_at, dtau)
                        }
                        _ => TimedActionChunk::from_observation_grid(&p.chunk, dtau),
                    };
                    buffer.replace(timed);
                    set_event(&mut event, EV_INFERENCE_DONE);
                }

                let outcome = buffer.select(t + delta)?;
                if outcome.dropped > 0 {
                    set_event(&mut event, EV_STALE_DROP);
                }
                if outcome.held {
                    set_event(&mut event, EV_HOLD);
                }
                selected = outcome.effective_ts;
                commanded = outcome.pose;
            }
        }

        cell.send_command(t, &commanded);
        if trace.is_some() {
            event = trace; // TEMP diagnostic
        }

        let (buf_size, buf_next) = buffer.state();
        let feedback = cell
            .latest_pose()
            .map(|(_, p)| p.as_array())
            .unwrap_or_else(|| start_pose.as_array());
        let wrench = cell.latest_wrench().map(|(_, w)| *w).unwrap_or([0.0; 6]);
        records.push(RolloutRecord {
            t: t.secs(),
            commanded_pose: commanded.as_array(),
            feedback_pose: feedback,
            wrench_ext: wrench,
            buffer: BufferState {
                size: buf_size,
                next_exec_ts: buf_next.map(|x| x.secs()),
            },
            selected_exec_ts: selected.map(|x| x.secs()),
            event,
        });

        // Online completion check on the true plant state.
        if completed_at.is_none() {
            let frac = (cell.plant().position() - goal).norm() / denom;
            if frac < ep.completion_fraction {
                let since = *below_since.get_or_insert(t);
                if (t - since).secs() >= ep.completion_sustain_s {
                    completed_at = Some(t);
                    stop_at = Some(t + Duration::from_secs(ep.post_completion_s));
                }
            } else {
                below_since = None;
            }
        }

        cycle += 1;
    }

    let meta = RolloutMeta {
        strategy: ep.exec.strategy,
        inference_latency_s: ep.inference_latency_s,
        delta_s: ep.exec.delta_s,
        dtau_s: ep.exec.dtau_s,
        command_period_s: ep.command_period_s,
        seed,
        start: [start.x, start.y, start.z],
        goal: [goal.x, goal.y, goal.z],
        completed: completed_at.is_some(),
        duration_s: completed_at.unwrap_or(final_t).secs(),
    };
    Ok(RolloutLog { meta, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_to_9d, Pose};
    use crate::policy::DemoDataset;
    use crate::sensing::Observation;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    fn ts(s: f64) -> Timestamp {
        Timestamp::from_secs(s)
    }

    fn pose9(x: f64, y: f64, z: f64) -> Pose9D {
        pose_to_9d(&Pose::from_position(Vector3::new(x, y, z)))
    }

    fn chunk_with_offsets(tau_obs: f64, base: Pose9D, dx: &[f64]) -> ActionChunk {
        ActionChunk {
            tau_obs: ts(tau_obs),
            base: base.as_array(),
            relative: dx
                .iter()
                .map(|d| {
                    let mut r = [0.0; 9];
                    r[0] = *d;
                    r
                })
                .collect(),
        }
    }

    #[test]
    fn observation_grid_stamps_entries_one_period_apart() {
        let base = pose9(0.0, 0.0, 0.0);
        let chunk = chunk_with_offsets(2.0, base, &[0.0; 16]);
        let timed = TimedActionChunk::from_observation_grid(&chunk, Duration::from_secs(0.1));
        assert_eq!(timed.entries.len(), 16);
        for (i, e) in timed.entries.iter().enumerate() {
            let expect = ts(2.0) + Duration::from_secs((i + 1) as f64 * 0.1);
            assert_eq!(e.exec_ts, expect);
        }
        assert_eq!(timed.entries[0].exec_ts.secs(), 2.1);
        assert_eq!(timed.entries[15].exec_ts.secs(), 2.0 + 16.0 * 0.1);
    }

    #[test]
    fn arrival_grid_makes_the_first_entry_immediately_due() {
        let base = pose9(0.0, 0.0, 0.0);
        let chunk = chunk_with_offsets(2.0, base, &[0.0; 4]);
        let timed =
            TimedActionChunk::from_arrival_grid(&chunk, ts(5.0), Duration::from_secs(0.1));
        assert_eq!(timed.entries[0].exec_ts, ts(5.0));
        assert_eq!(
            timed.entries[3].exec_ts,
            ts(5.0) + Duration::from_secs(3.0 * 0.1)
        );
    }

    #[test]
    fn selection_interpolates_between_bracketing_entries() {
        let base = pose9(1.0, 0.0, 0.0);
        let chunk = chunk_with_offsets(1.0, base, &[0.00, 0.02]);
        let mut buf = ActionBuffer::new(base);
        buf.replace(TimedActionChunk::from_observation_grid(
            &chunk,
            Duration::from_secs(0.1),
        ));
        // Entries at 1.1 and 1.2; midway the offset is the average.
        let out = buf.select(ts(1.15)).unwrap();
        assert!(!out.held && !out.clamped);
        assert_relative_eq!(out.pose.position.x, 1.01, epsilon = 1e-12);
        assert_eq!(out.effective_ts, Some(ts(1.15)));
    }

    #[test]
    fn early_target_clamps_to_the_first_entry() {
        let base = pose9(0.0, 0.0, 0.0);
        let chunk = chunk_with_offsets(1.0, base, &[0.05, 0.10]);
        let mut buf = ActionBuffer::new(base);
        buf.replace(TimedActionChunk::from_observation_grid(
            &chunk,
            Duration::from_secs(0.1),
        ));
        let out = buf.select(ts(0.5)).unwrap();
        assert!(out.clamped);
        assert_eq!(out.effective_ts, Some(ts(1.0) + Duration::from_secs(0.1)));
        assert_relative_eq!(out.pose.position.x, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn exhausted_chunk_holds_the_previous_command() {
        let base = pose9(0.0, 0.0, 0.0);
        let chunk = chunk_with_offsets(1.0, base, &[0.05]);
        let mut buf = ActionBuffer::new(base);
        buf.replace(TimedActionChunk::from_observation_grid(
            &chunk,
            Duration::from_secs(0.1),
        ));
        let hit = buf.select(ts(1.1)).unwrap();
        assert!(!hit.held);
        assert_relative_eq!(hit.pose.position.x, 0.05, epsilon = 1e-12);
        let out = buf.select(ts(2.0)).unwrap();
        assert!(out.held);
        assert_eq!(out.effective_ts, None);
        assert_relative_eq!(out.pose.position.x, 0.05, epsilon = 1e-12);
        // The buffer reports empty afterwards.
        assert_eq!(buf.state().0, 0);
    }

    #[test]
    fn empty_buffer_holds_the_initial_pose() {
        let init = pose9(0.3, 0.1, 0.2);
        let mut buf = ActionBuffer::new(init);
        let out = buf.select(ts(0.0)).unwrap();
        assert!(out.held);
        assert_eq!(out.pose, init);
    }

    #[test]
    fn consumption_is_monotone_and_counts_drops() {
        let base = pose9(0.0, 0.0, 0.0);
        let chunk = chunk_with_offsets(1.0, base, &[0.01, 0.02, 0.03, 0.04, 0.05]);
        let mut buf = ActionBuffer::new(base);
        buf.replace(TimedActionChunk::from_observation_grid(
            &chunk,
            Duration::from_secs(0.1),
        ));
        // Entries at 1.1..1.5; a jump to 1.45 consumes 1.1..1.3.
        let out = buf.select(ts(1.45)).unwrap();
        assert_eq!(out.dropped, 3);
        assert_relative_eq!(out.pose.position.x, 0.045, epsilon = 1e-12);
        // Going strictly forward never resurrects consumed entries.
        let again = buf.select(ts(1.45)).unwrap();
        assert_eq!(again.dropped, 0);
        assert_eq!(again.pose, out.pose);
    }

    #[test]
    fn replacing_a_chunk_switches_selection_to_it() {
        let base = pose9(0.0, 0.0, 0.0);
        let mut buf = ActionBuffer::new(base);
        buf.replace(TimedActionChunk::from_observation_grid(
            &chunk_with_offsets(1.0, base, &[0.01, 0.02]),
            Duration::from_secs(0.1),
        ));
        buf.replace(TimedActionChunk::from_observation_grid(
            &chunk_with_offsets(1.0, base, &[0.07, 0.08]),
            Duration::from_secs(0.1),
        ));
        let out = buf.select(ts(1.1)).unwrap();
        assert_relative_eq!(out.pose.position.x, 0.07, epsilon = 1e-12);
    }

    // --- closed-loop episodes -------------------------------------------------

    /// A synthetic dataset: a straight-line descent above the slot with
    /// constant wrench and visual content (ranking then depends on pose
    /// alone, which is all these tests need).
    fn synthetic_policy(visual_dim: usize) -> KnnPolicy {
        let geom = crate::simworld::TaskGeometry::default();
        let n = 40;
        let demo: Vec<Observation> = (0..n)
            .map(|i| {
                let t = i as f64 * 0.1;
                let z = 0.200 - 0.003 * i as f64;
                Observation {
                    tau_obs: ts(t),
                    pose9d: pose9(geom.entry_x, 0.0, z).as_array(),
                    wrench: [0.0; 6],
                    visual: vec![0.0; visual_dim],
                }
            })
            .collect();
        let dataset = DemoDataset::build(&[demo], 16, (0.01, 0.99)).unwrap();
        KnnPolicy::new(dataset, 1)
    }

    fn episode(strategy: Strategy, delta_s: f64, il_s: f64, horizon_s: f64) -> EpisodeConfig {
        EpisodeConfig {
            exec: ExecConfig {
                strategy,
                delta_s,
                dtau_s: 0.1,
                blocking_exec_count: 8,
            },
            inference_latency_s: il_s,
            command_period_s: 0.012,
            horizon_s,
            completion_fraction: 0.02,
            completion_sustain_s: 0.5,
            post_completion_s: 0.6,
        }
    }

    fn quiet_cell() -> SimCellConfig {
        // Start high enough that the synthetic descent never reaches contact.
        SimCellConfig::default()
    }

    #[test]
    fn zero_latency_naive_and_aware_streams_are_bitwise_identical() {
        let policy = synthetic_policy(600);
        let cell = quiet_cell();
        let start = pose9(cell.geom.entry_x, 0.0, 0.200);
        let naive = run_episode(
            &cell,
            &policy,
            &episode(Strategy::NaiveAsync, 0.0, 0.0, 2.0),
            &start,
            1,
        )
        .unwrap();
        let aware = run_episode(
            &cell,
            &policy,
            &episode(Strategy::LatencyAware, 0.0, 0.0, 2.0),
            &start,
            1,
        )
        .unwrap();
        assert_eq!(naive.records.len(), aware.records.len());
        for (a, b) in naive.records.iter().zip(aware.records.iter()) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.commanded_pose, b.commanded_pose, "diverged at t={}", a.t);
            assert_eq!(a.feedback_pose, b.feedback_pose);
        }
    }

    #[test]
    fn aware_selection_targets_now_plus_delta_and_is_never_stale() {
        let policy = synthetic_policy(600);
        let cell = quiet_cell();
        let start = pose9(cell.geom.entry_x, 0.0, 0.200);
        let delta = 0.305;
        let log = run_episode(
            &cell,
            &policy,
            &episode(Strategy::LatencyAware, delta, 0.1, 3.0),
            &start,
            1,
        )
        .unwrap();
        let mut selections = 0;
        for r in &log.records {
            if let Some(sel) = r.selected_exec_ts {
                assert!(
                    sel >= r.t + delta - 1e-12,
                    "stale selection {} at t={}",
                    sel,
                    r.t
                );
                selections += 1;
            }
        }
        assert!(selections > 100, "expected routine selections, got {selections}");
    }

    #[test]
    fn blocking_paces_a_burst_then_reinfers() {
        let policy = synthetic_policy(600);
        let cell = quiet_cell();
        let start = pose9(cell.geom.entry_x, 0.0, 0.200);
        let log = run_episode(
            &cell,
            &policy,
            &episode(Strategy::Blocking, 0.0, 0.3, 4.0),
            &start,
            1,
        )
        .unwrap();
        // Blocking never reports a selected grid timestamp.
        assert!(log.records.iter().all(|r| r.selected_exec_ts.is_none()));

        let done_times: Vec<f64> = log
            .records
            .iter()
            .filter(|r| r.event.as_deref() == Some(EV_INFERENCE_DONE))
            .map(|r| r.t)
            .collect();
        assert!(done_times.len() >= 2, "expected several bursts");
        // Between consecutive completions: 8 paced steps plus the next
        // inference, so at least 8 * dtau + latency.
        for w in done_times.windows(2) {
            assert!(
                w[1] - w[0] >= 8.0 * 0.1 + 0.3 - 1e-9,
                "bursts too close: {w:?}"
            );
        }
        // Commands change exactly once per paced step inside a burst.
        let start_t = done_times[0];
        let in_burst: Vec<&RolloutRecord> = log
            .records
            .iter()
            .filter(|r| r.t >= start_t && r.t < start_t + 0.8)
            .collect();
        let mut changes = 0;
        for w in in_burst.windows(2) {
            if w[1].commanded_pose != w[0].commanded_pose {
                changes += 1;
            }
        }
        assert_eq!(changes, 7, "8 paced commands mean 7 changes inside the burst");
    }

    #[test]
    fn logs_round_trip_through_jsonl() {
        let policy = synthetic_policy(600);
        let cell = quiet_cell();
        let start = pose9(cell.geom.entry_x, 0.0, 0.200);
        let log = run_episode(
            &cell,
            &policy,
            &episode(Strategy::LatencyAware, 0.305, 0.1, 1.0),
            &start,
            42,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rollout.jsonl");
        log.write_jsonl(&path).unwrap();
        let back = RolloutLog::read_jsonl(&path).unwrap();
        assert_eq!(back.meta.seed, 42);
        assert_eq!(back.records.len(), log.records.len());
        for (a, b) in log.records.iter().zip(back.records.iter()) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.commanded_pose, b.commanded_pose);
            assert_eq!(a.selected_exec_ts, b.selected_exec_ts);
            assert_eq!(a.event, b.event);
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::from_str(s.name()).unwrap(), s);
        }
        assert!(Strategy::from_str("sync").is_err());
    }
}
