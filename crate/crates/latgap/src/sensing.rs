//! Sensor streams, gravity compensation, resampling, and latency
//! estimation.
//!
//! Measurements carry their capture timestamps (latency correction is
//! applied at publication), so downstream consumers reason about *when* a
//! value was true rather than when it arrived. Wrenches are ordered force
//! then moment. Gravity compensation transports the world-frame gravity
//! wrench into the sensor frame with the adjoint matrix and subtracts it
//! from the raw reading; the simulator synthesizes gravity readings through
//! the same transport, so compensation cancels it exactly.

use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{adjoint, gram_schmidt_6d, Pose, Pose9D};
use crate::timebase::{Duration, Timestamp};

/// Standard gravity, m/s^2.
pub const STANDARD_GRAVITY: f64 = 9.80665;

/// Observation layout: pose (9) + external wrench (6) + visual features.
pub const POSE_DIM: usize = 9;
pub const WRENCH_DIM: usize = 6;
pub const VISUAL_DIM: usize = 600;
pub const OBS_DIM: usize = POSE_DIM + WRENCH_DIM + VISUAL_DIM;

#[derive(Debug, Error, PartialEq)]
pub enum SensingError {
    #[error("wrench frame mismatch: expected {expected:?}, got {got:?}")]
    FrameMismatch { expected: WrenchFrame, got: WrenchFrame },
    #[error("stream '{0}' is empty")]
    EmptyStream(&'static str),
    #[error("stream '{0}' timestamps are not strictly increasing")]
    UnsortedStream(&'static str),
    #[error("streams have no overlapping time window")]
    NoOverlap,
    #[error("need at least {need} samples, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("commanded trajectory slope {slope:.3e} m/s too small: time shift unobservable")]
    UnobservableShift { slope: f64 },
    #[error("empty input")]
    EmptyInput,
}

/// Frame a wrench is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WrenchFrame {
    World,
    Sensor,
}

/// Force + moment pair, tagged with its frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub moment: Vector3<f64>,
    pub frame: WrenchFrame,
}

impl Wrench {
    pub fn zero(frame: WrenchFrame) -> Self {
        Wrench {
            force: Vector3::zeros(),
            moment: Vector3::zeros(),
            frame,
        }
    }

    /// Packs as [force; moment].
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.force.x,
            self.force.y,
            self.force.z,
            self.moment.x,
            self.moment.y,
            self.moment.z,
        ]
    }

    pub fn from_array(v: &[f64; 6], frame: WrenchFrame) -> Self {
        Wrench {
            force: Vector3::new(v[0], v[1], v[2]),
            moment: Vector3::new(v[3], v[4], v[5]),
            frame,
        }
    }

    fn as_vector6(&self) -> Vector6<f64> {
        Vector6::new(
            self.force.x,
            self.force.y,
            self.force.z,
            self.moment.x,
            self.moment.y,
            self.moment.z,
        )
    }
}

/// Rigid payload model used for gravity compensation: mass and
/// center of mass expressed in the sensor frame.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MassModel {
    pub mass: f64,
    pub com: [f64; 3],
    pub gravity: f64,
}

impl MassModel {
    pub fn new(mass: f64, com: Vector3<f64>) -> Self {
        MassModel {
            mass,
            com: [com.x, com.y, com.z],
            gravity: STANDARD_GRAVITY,
        }
    }

    pub fn com_vec(&self) -> Vector3<f64> {
        Vector3::new(self.com[0], self.com[1], self.com[2])
    }
}

/// Gravity wrench in the world frame: force (0, 0, -M g) acting at the
/// payload's center of mass, moment taken about the world origin.
pub fn gravity_wrench_world(model: &MassModel, sensor_pose: &Pose) -> Wrench {
    let force = Vector3::new(0.0, 0.0, -model.mass * model.gravity);
    let com_world = sensor_pose.rotation * model.com_vec() + sensor_pose.position;
    Wrench {
        force,
        moment: com_world.cross(&force),
        frame: WrenchFrame::World,
    }
}

/// Gravity wrench transported into the sensor frame via the adjoint of the
/// sensor pose. The simulated sensor synthesizes its gravity reading through
/// this same function, so subtracting it cancels gravity exactly.
pub fn gravity_wrench_sensor(model: &MassModel, sensor_pose: &Pose) -> Wrench {
    let w = gravity_wrench_world(model, sensor_pose).as_vector6();
    let f = adjoint(sensor_pose) * w;
    Wrench {
        force: Vector3::new(f[0], f[1], f[2]),
        moment: Vector3::new(f[3], f[4], f[5]),
        frame: WrenchFrame::Sensor,
    }
}

/// Subtracts the transported gravity wrench from a raw sensor-frame
/// reading, leaving the external (contact) wrench.
pub fn compensate(
    measured: &Wrench,
    sensor_pose: &Pose,
    model: &MassModel,
) -> Result<Wrench, SensingError> {
    if measured.frame != WrenchFrame::Sensor {
        return Err(SensingError::FrameMismatch {
            expected: WrenchFrame::Sensor,
            got: measured.frame,
        });
    }
    let g = gravity_wrench_sensor(model, sensor_pose);
    Ok(Wrench {
        force: measured.force - g.force,
        moment: measured.moment - g.moment,
        frame: WrenchFrame::Sensor,
    })
}

/// A timestamped sample from a sensor stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamSample<V> {
    pub timestamp: Timestamp,
    pub value: V,
}

impl<V> StreamSample<V> {
    pub fn new(timestamp: Timestamp, value: V) -> Self {
        StreamSample { timestamp, value }
    }
}

/// One synchronized observation on the policy grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub tau_obs: Timestamp,
    pub pose9d: [f64; 9],
    pub wrench: [f64; 6],
    pub visual: Vec<f64>,
}

impl Observation {
    pub fn dim(&self) -> usize {
        POSE_DIM + WRENCH_DIM + self.visual.len()
    }

    /// Flattens to [pose9d, wrench, visual].
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.pose9d);
        v.extend_from_slice(&self.wrench);
        v.extend_from_slice(&self.visual);
        v
    }

    pub fn pose(&self) -> Pose9D {
        Pose9D::from_array(&self.pose9d)
    }
}

/// How [`resample`] fills grid ticks from raw samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleMode {
    /// Linear interpolation between bracketing samples (offline demo
    /// processing). Rotation columns are interpolated then re-projected;
    /// visual features always use the most recent sample.
    Interpolating,
    /// Most recent sample at or before the grid tick (causal; used when
    /// assembling observations online).
    LastValue,
}

fn check_sorted<V>(stream: &[StreamSample<V>], name: &'static str) -> Result<(), SensingError> {
    if stream.is_empty() {
        return Err(SensingError::EmptyStream(name));
    }
    for w in stream.windows(2) {
        if w[1].timestamp <= w[0].timestamp {
            return Err(SensingError::UnsortedStream(name));
        }
    }
    Ok(())
}

/// Index of the last sample with timestamp <= t. Streams are validated to
/// start at or before the grid ticks they serve.
fn last_at_or_before<V>(stream: &[StreamSample<V>], t: Timestamp) -> usize {
    stream.partition_point(|s| s.timestamp <= t).saturating_sub(1)
}

fn lerp_slice(a: &[f64], b: &[f64], lambda: f64, out: &mut [f64]) {
    for i in 0..out.len() {
        out[i] = a[i] + lambda * (b[i] - a[i]);
    }
}

/// Resamples per-modality streams onto a fixed-rate grid anchored at the
/// start of their common overlap window, producing one observation per
/// tick. `tau_obs` is the tick time.
pub fn resample(
    poses: &[StreamSample<Pose9D>],
    wrenches: &[StreamSample<[f64; 6]>],
    visuals: &[StreamSample<Vec<f64>>],
    grid_hz: f64,
    mode: ResampleMode,
) -> Result<Vec<Observation>, SensingError> {
    check_sorted(poses, "pose")?;
    check_sorted(wrenches, "wrench")?;
    check_sorted(visuals, "visual")?;
    assert!(grid_hz > 0.0, "grid rate must be positive");

    let start = poses[0]
        .timestamp
        .max(wrenches[0].timestamp)
        .max(visuals[0].timestamp);
    let end = poses[poses.len() - 1]
        .timestamp
        .min(wrenches[wrenches.len() - 1].timestamp)
        .min(visuals[visuals.len() - 1].timestamp);
    if end < start {
        return Err(SensingError::NoOverlap);
    }
    let span = (end - start).secs();
    // Tiny slack so a tick landing on the window edge is not lost to
    // rounding.
    let ticks = (span * grid_hz + 1e-9).floor() as usize + 1;

    let mut out = Vec::with_capacity(ticks);
    for k in 0..ticks {
        let t = start + Duration::from_secs(k as f64 / grid_hz);

        let pose9d = match mode {
            ResampleMode::LastValue => poses[last_at_or_before(poses, t)].value.as_array(),
            ResampleMode::Interpolating => interpolate_pose(poses, t),
        };

        let wrench = match mode {
            ResampleMode::LastValue => wrenches[last_at_or_before(wrenches, t)].value,
            ResampleMode::Interpolating => {
                let i = last_at_or_before(wrenches, t);
                if i + 1 < wrenches.len() && wrenches[i].timestamp < t {
                    let (a, b) = (&wrenches[i], &wrenches[i + 1]);
                    let lambda = (t - a.timestamp) / (b.timestamp - a.timestamp);
                    let mut w = [0.0; 6];
                    lerp_slice(&a.value, &b.value, lambda, &mut w);
                    w
                } else {
                    wrenches[i].value
                }
            }
        };

        // Images are always sample-and-hold: the most recent frame.
        let visual = visuals[last_at_or_before(visuals, t)].value.clone();

        out.push(Observation {
            tau_obs: t,
            pose9d,
            wrench,
            visual,
        });
    }
    Ok(out)
}

/// Linear interpolation in 9D followed by Gram-Schmidt re-projection of the
/// rotation columns, so interpolated observations stay on the manifold.
fn interpolate_pose(poses: &[StreamSample<Pose9D>], t: Timestamp) -> [f64; 9] {
    let i = last_at_or_before(poses, t);
    if i + 1 >= poses.len() || poses[i].timestamp >= t {
        return poses[i].value.as_array();
    }
    let (a, b) = (&poses[i], &poses[i + 1]);
    let lambda = (t - a.timestamp) / (b.timestamp - a.timestamp);
    let mut raw = [0.0; 9];
    lerp_slice(&a.value.as_array(), &b.value.as_array(), lambda, &mut raw);
    let mut p = Pose9D::from_array(&raw);
    // Neighbouring demo rotations are far from degenerate, so projection
    // cannot fail; fall back to the earlier sample if it ever does.
    match gram_schmidt_6d(&p.rot6d) {
        Ok(r) => {
            let c0 = r.column(0);
            let c1 = r.column(1);
            p.rot6d = [c0[0], c0[1], c0[2], c1[0], c1[1], c1[2]];
            p.as_array()
        }
        Err(_) => a.value.as_array(),
    }
}

/// Drops maximal runs of consecutive observations whose pose positions move
/// less than `eps_pose` per step, keeping the first observation of each
/// run. Timestamps of retained observations are compacted by the removed
/// time, so spacing inside retained runs is preserved.
pub fn remove_idle_segments(demo: &[Observation], eps_pose: f64) -> Vec<Observation> {
    if demo.is_empty() {
        return Vec::new();
    }
    let pos = |o: &Observation| Vector3::new(o.pose9d[0], o.pose9d[1], o.pose9d[2]);
    let mut out = Vec::with_capacity(demo.len());
    out.push(demo[0].clone());
    let mut removed = Duration::ZERO;
    for i in 1..demo.len() {
        let step = (pos(&demo[i]) - pos(&demo[i - 1])).norm();
        if step >= eps_pose {
            let mut o = demo[i].clone();
            o.tau_obs = o.tau_obs - removed;
            out.push(o);
        } else {
            removed = removed + (demo[i].tau_obs - demo[i - 1].tau_obs);
        }
    }
    out
}

fn linear_fit(samples: &[(f64, f64)]) -> (f64, f64) {
    let n = samples.len() as f64;
    let t_mean = samples.iter().map(|(t, _)| t).sum::<f64>() / n;
    let x_mean = samples.iter().map(|(_, x)| x).sum::<f64>() / n;
    let mut stt = 0.0;
    let mut stx = 0.0;
    for (t, x) in samples {
        let dt = t - t_mean;
        stt += dt * dt;
        stx += dt * (x - x_mean);
    }
    let slope = stx / stt;
    let intercept = x_mean - slope * t_mean;
    (intercept, slope)
}

/// Estimates the time shift between a commanded and a tracked
/// constant-velocity trajectory by fitting lines to both and dividing the
/// intercept difference by the commanded slope. Both inputs are (t, x)
/// pairs restricted to the constant-velocity window.
pub fn estimate_execution_latency(
    commanded: &[(f64, f64)],
    tracked: &[(f64, f64)],
) -> Result<Duration, SensingError> {
    for s in [commanded, tracked] {
        if s.len() < 10 {
            return Err(SensingError::InsufficientSamples {
                need: 10,
                got: s.len(),
            });
        }
    }
    let (a_cmd, b_cmd) = linear_fit(commanded);
    let (a_trk, _) = linear_fit(tracked);
    if b_cmd.abs() < 1e-6 {
        return Err(SensingError::UnobservableShift { slope: b_cmd });
    }
    Ok(Duration::from_secs((a_cmd - a_trk) / b_cmd))
}

/// Median transport delay from (emitted, received) timestamp pairs.
pub fn estimate_observation_latency(
    pairs: &[(Timestamp, Timestamp)],
) -> Result<Duration, SensingError> {
    if pairs.is_empty() {
        return Err(SensingError::EmptyInput);
    }
    let mut delays: Vec<f64> = pairs
        .iter()
        .map(|(emitted, received)| (*received - *emitted).secs())
        .collect();
    delays.sort_by(|a, b| a.total_cmp(b));
    let n = delays.len();
    let median = if n % 2 == 1 {
        delays[n / 2]
    } else {
        0.5 * (delays[n / 2 - 1] + delays[n / 2])
    };
    Ok(Duration::from_secs(median))
}
