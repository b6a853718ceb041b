//! Deterministic stand-in for the robot cell.
//!
//! The plant models setpoint streaming through a pure transport delay
//! followed by a first-order tracking law, integrated semi-implicitly on a
//! fixed subdivision of the command period. Contact with the slotted
//! fixture is a penalty model (spring-damper normals, regularized Coulomb
//! friction) applied at the velocity level through a mobility constant. A
//! scripted demonstrator produces seeded insertion demonstrations, and the
//! hand-controller mapping is provided as a pure transform over recorded
//! streams.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pose_to_9d, so3_exp, so3_log, GeometryError, Pose, Pose9D};
use crate::sensing::{
    compensate, gravity_wrench_sensor, MassModel, StreamSample, Wrench, WrenchFrame,
};
use crate::timebase::{DelayedChannel, Duration, Timestamp};
use crate::vision::{hog_encode, rasterize, GrayImage, HogParams, ShadedRect, ViewBounds};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("demonstrator did not reach the goal (seed {seed}, final distance {distance:.4} m)")]
    ExpertFailed { seed: u64, distance: f64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed controller stream: {0}")]
    Parse(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Plant
// ---------------------------------------------------------------------------

/// Setpoint-tracking plant parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PlantConfig {
    /// Transport delay before a command reaches the tracking loop, s.
    pub pure_delay_s: f64,
    /// First-order tracking time constant, s. Zero means perfect tracking.
    pub tracking_tau_s: f64,
    /// Slew limit on the chased setpoint, m/s: the tracking loop follows a
    /// rate-limited internal target, as velocity-limited controllers do, so
    /// a large command step is traversed at this speed instead of being
    /// swallowed whole. Zero disables the limit.
    pub setpoint_rate_mps: f64,
    /// Integration step, s (the command period subdivided).
    pub step_s: f64,
    /// Velocity admitted per newton of contact force, m/s/N.
    pub mobility: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            pure_delay_s: 0.080,
            tracking_tau_s: 0.040,
            setpoint_rate_mps: 0.045,
            step_s: 0.003,
            mobility: 2e-6,
        }
    }
}

/// TCP plant: commanded setpoints enter a timestamped history; the tracking
/// law follows the history linearly interpolated at (now - pure_delay), so
/// a constant-velocity command ramp is tracked with a composite shift of
/// exactly pure_delay + tracking_tau in steady state.
pub struct Plant {
    cfg: PlantConfig,
    t0: Timestamp,
    steps: u64,
    position: Vector3<f64>,
    velocity: Vector3<f64>,
    chase: Vector3<f64>,
    orientation: Matrix3<f64>,
    history: Vec<(Timestamp, Vector3<f64>, [f64; 6])>,
}

impl Plant {
    pub fn new(cfg: PlantConfig, initial: &Pose9D, t0: Timestamp) -> Self {
        Plant {
            cfg,
            t0,
            steps: 0,
            position: initial.position,
            velocity: Vector3::zeros(),
            chase: initial.position,
            orientation: crate::geometry::gram_schmidt_6d(&initial.rot6d)
                .unwrap_or_else(|_| Matrix3::identity()),
            history: vec![(t0, initial.position, initial.rot6d)],
        }
    }

    /// Moves the rate-limited internal target toward the delayed setpoint.
    fn chase_toward(&mut self, u: &Vector3<f64>, h: f64) -> Vector3<f64> {
        if self.cfg.setpoint_rate_mps <= 0.0 {
            self.chase = *u;
            return self.chase;
        }
        let du = u - self.chase;
        let max_step = self.cfg.setpoint_rate_mps * h;
        let dist = du.norm();
        if dist <= max_step {
            self.chase = *u;
        } else {
            self.chase += du * (max_step / dist);
        }
        self.chase
    }

    pub fn now(&self) -> Timestamp {
        self.t0 + Duration::from_secs(self.steps as f64 * self.cfg.step_s)
    }

    pub fn position(&self) -> Vector3<f64> {
        self.position
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.velocity
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.position, self.orientation)
    }

    pub fn pose9d(&self) -> Pose9D {
        pose_to_9d(&self.pose())
    }

    /// Appends a commanded setpoint. Commands at a repeated timestamp
    /// overwrite forward (the later value wins), which represents a step.
    pub fn send_command(&mut self, t: Timestamp, setpoint: &Pose9D) {
        self.history.push((t, setpoint.position, setpoint.rot6d));
        // Bound the history: keep a generous margin behind the delay line.
        if self.history.len() > 4096 {
            let cutoff = self.now() - Duration::from_secs(self.cfg.pure_delay_s + 1.0);
            let keep_from = self
                .history
                .partition_point(|e| e.0 < cutoff)
                .saturating_sub(1);
            self.history.drain(..keep_from);
        }
    }

    /// The command history linearly interpolated at (t - pure_delay),
    /// clamped at both ends.
    pub fn delayed_setpoint(&self, t: Timestamp) -> (Vector3<f64>, [f64; 6]) {
        let q = t - Duration::from_secs(self.cfg.pure_delay_s);
        let i = self.history.partition_point(|e| e.0 <= q);
        if i == 0 {
            let e = &self.history[0];
            return (e.1, e.2);
        }
        if i == self.history.len() {
            let e = &self.history[i - 1];
            return (e.1, e.2);
        }
        let (ta, pa, ra) = &self.history[i - 1];
        let (tb, pb, _) = &self.history[i];
        let lambda = (q - *ta) / (*tb - *ta);
        ((1.0 - lambda) * pa + lambda * pb, *ra)
    }

    /// Advances one integration step: velocity from the tracking law plus
    /// the mobility-scaled contact force, then position with the new
    /// velocity.
    pub fn step_once(&mut self, geom: Option<&TaskGeometry>) {
        let h = self.cfg.step_s;
        let now = self.now();
        let (u, rot) = self.delayed_setpoint(now);

        let contact_force = match geom {
            Some(g) => {
                let w = contact_wrench(g, &self.pose(), &self.velocity);
                // Orientation is rigid here; the sensor-frame force rotated
                // back is the world-frame contact force.
                self.orientation * w.force
            }
            None => Vector3::zeros(),
        };

        if self.cfg.tracking_tau_s == 0.0 {
            let next = self.now_after(1);
            let (u_next, rot_next) = self.delayed_setpoint(next);
            let target = self.chase_toward(&u_next, h);
            self.velocity = (target - self.position) / h + self.cfg.mobility * contact_force;
            self.position = target + self.cfg.mobility * contact_force * h;
            self.orientation = crate::geometry::gram_schmidt_6d(&rot_next)
                .unwrap_or(self.orientation);
        } else {
            let target = self.chase_toward(&u, h);
            let v = (target - self.position) / self.cfg.tracking_tau_s
                + self.cfg.mobility * contact_force;
            self.velocity = v;
            self.position += h * v;
            self.orientation =
                crate::geometry::gram_schmidt_6d(&rot).unwrap_or(self.orientation);
        }
        self.steps += 1;
    }

    fn now_after(&self, extra: u64) -> Timestamp {
        self.t0 + Duration::from_secs((self.steps + extra) as f64 * self.cfg.step_s)
    }

    /// Steps until the internal clock reaches `t`. Targets are intended to
    /// be step-grid multiples, so comparisons carry half a step of slack to
    /// absorb accumulated rounding between independently computed grids.
    pub fn advance_to(&mut self, t: Timestamp, geom: Option<&TaskGeometry>) {
        let limit = t + Duration::from_secs(self.cfg.step_s / 2.0);
        while self.now_after(1) <= limit {
            self.step_once(geom);
        }
    }
}

// ---------------------------------------------------------------------------
// Contact
// ---------------------------------------------------------------------------

/// Channel-fixture geometry and contact parameters. A fixed body carries a
/// channel cut along the x axis: side walls across the channel (in y), end
/// walls at the span limits, an interior floor, and top faces outside the
/// opening. The peg is a square-section bar hanging below the TCP; it is
/// lowered into the channel and slid along the axis to the goal.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TaskGeometry {
    /// Channel span along its axis, m.
    pub channel_x0: f64,
    pub channel_x1: f64,
    /// Interior floor height at the channel opening, m.
    pub floor_z: f64,
    /// Total floor descent from the opening to the far end, m; zero keeps
    /// the channel floor level.
    pub floor_drop: f64,
    /// Top face of the fixture body, m.
    pub top_z: f64,
    /// Channel half-width across the axis (y), m.
    pub channel_half_width: f64,
    /// Fixture body extent along x, m.
    pub body_x0: f64,
    pub body_x1: f64,
    /// Peg square cross-section side, m.
    pub peg_width: f64,
    pub peg_length: f64,
    /// Station along the axis where the descent happens, m.
    pub entry_x: f64,
    /// Penalty stiffness, N/m.
    pub stiffness: f64,
    /// Penetration-rate damping, N·s/m.
    pub damping: f64,
    /// Coulomb friction coefficient.
    pub friction: f64,
    /// Velocity scale regularizing the friction direction, m/s.
    pub friction_v_eps: f64,
    /// Contact point relative to the sensor origin (the peg tip), m.
    pub lever: [f64; 3],
    pub start: [f64; 3],
    pub goal: [f64; 3],
}

impl Default for TaskGeometry {
    fn default() -> Self {
        TaskGeometry {
            channel_x0: 0.150,
            channel_x1: 0.310,
            floor_z: 0.060,
            floor_drop: 0.0,
            top_z: 0.100,
            channel_half_width: 0.020,
            body_x0: 0.100,
            body_x1: 0.360,
            peg_width: 0.038,
            peg_length: 0.120,
            entry_x: 0.180,
            stiffness: 5e4,
            damping: 200.0,
            friction: 0.4,
            friction_v_eps: 1e-3,
            lever: [0.0, 0.0, -0.120],
            start: [0.050, 0.0, 0.200],
            goal: [0.280, 0.0, 0.060],
        }
    }
}

impl TaskGeometry {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.peg_width >= 2.0 * self.channel_half_width {
            return Err(SimError::InvalidConfig(format!(
                "peg width {} must be smaller than channel width {}",
                self.peg_width,
                2.0 * self.channel_half_width
            )));
        }
        if self.floor_z >= self.top_z {
            return Err(SimError::InvalidConfig(
                "channel floor must lie below the top face".into(),
            ));
        }
        if self.channel_x0 >= self.channel_x1
            || self.body_x0 > self.channel_x0
            || self.body_x1 < self.channel_x1
        {
            return Err(SimError::InvalidConfig(
                "channel span must be positive and inside the body".into(),
            ));
        }
        let margin = self.peg_width / 2.0;
        for (label, x) in [("entry", self.entry_x), ("goal", self.goal[0])] {
            if x - margin < self.channel_x0 || x + margin > self.channel_x1 {
                return Err(SimError::InvalidConfig(format!(
                    "{label} station {x} leaves the channel span"
                )));
            }
        }
        if self.floor_drop < 0.0 || self.floor_drop >= self.floor_z {
            return Err(SimError::InvalidConfig(
                "floor descent must be non-negative and shallower than the floor height".into(),
            ));
        }
        if self.stiffness <= 0.0 || self.friction < 0.0 || self.friction_v_eps <= 0.0 {
            return Err(SimError::InvalidConfig("contact parameters out of range".into()));
        }
        Ok(())
    }

    /// Floor slope along +x, m of descent per m of travel.
    pub fn floor_slope(&self) -> f64 {
        self.floor_drop / (self.channel_x1 - self.channel_x0)
    }

    /// Floor height under a station along the axis, m.
    pub fn floor_z_at(&self, x: f64) -> f64 {
        let span = (x - self.channel_x0).clamp(0.0, self.channel_x1 - self.channel_x0);
        self.floor_z - self.floor_slope() * span
    }

    pub fn start_vec(&self) -> Vector3<f64> {
        Vector3::from_column_slice(&self.start)
    }

    pub fn goal_vec(&self) -> Vector3<f64> {
        Vector3::from_column_slice(&self.goal)
    }
}

fn overlap_1d(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Spring-damper normal force magnitude, clamped to be non-adhesive.
fn normal_force(geom: &TaskGeometry, penetration: f64, pen_rate: f64) -> f64 {
    (geom.stiffness * penetration + geom.damping * pen_rate).max(0.0)
}

/// Regularized Coulomb friction opposing the tangential velocity.
fn friction_force(
    geom: &TaskGeometry,
    normal_magnitude: f64,
    velocity: &Vector3<f64>,
    normal_axis: &Vector3<f64>,
) -> Vector3<f64> {
    let v_t = velocity - normal_axis * velocity.dot(normal_axis);
    let speed = v_t.norm();
    let denom = (speed * speed + geom.friction_v_eps * geom.friction_v_eps).sqrt();
    if denom == 0.0 {
        return Vector3::zeros();
    }
    -geom.friction * normal_magnitude / denom * v_t
}

/// Penalty contact wrench on the peg, expressed in the sensor frame (force
/// rotated into the frame, moment = lever x force about the sensor origin).
/// Supports: the channel floor, the side walls across the axis (y), the end
/// walls limiting the span (x), and the body top faces outside the opening.
/// Floor and top support scale with the overlapping width so the hand-off
/// over the channel rim is continuous.
pub fn contact_wrench(geom: &TaskGeometry, peg_pose: &Pose, peg_velocity: &Vector3<f64>) -> Wrench {
    let p = peg_pose.position;
    let v = peg_velocity;
    let half = geom.peg_width / 2.0;
    let (x_lo, x_hi) = (p.x - half, p.x + half);
    let z_up = Vector3::z();
    let x_axis = Vector3::x();
    let y_axis = Vector3::y();

    let mut force = Vector3::zeros();

    // Channel floor, on the share of the peg inside the span; the tapered
    // floor height is taken at the middle of the overlapped stretch.
    let w_floor = overlap_1d(x_lo, x_hi, geom.channel_x0, geom.channel_x1);
    let floor_here = geom.floor_z_at((x_lo.max(geom.channel_x0) + x_hi.min(geom.channel_x1)) / 2.0);
    if w_floor > 0.0 && p.z < floor_here {
        let n = w_floor / geom.peg_width * normal_force(geom, floor_here - p.z, -v.z);
        force += n * z_up + friction_force(geom, n, v, &z_up);
    }

    // Body top faces outside the channel opening, scaled by supported width.
    for (r0, r1) in [
        (geom.body_x0, geom.channel_x0),
        (geom.channel_x1, geom.body_x1),
    ] {
        let w = overlap_1d(x_lo, x_hi, r0, r1);
        if w > 0.0 && p.z < geom.top_z {
            let n = w / geom.peg_width * normal_force(geom, geom.top_z - p.z, -v.z);
            force += n * z_up + friction_force(geom, n, v, &z_up);
        }
    }

    // Side walls across the axis, engaged once the tip is inside the opening.
    if p.z < geom.top_z && w_floor > 0.0 {
        let (y_lo, y_hi) = (p.y - half, p.y + half);
        if y_lo < -geom.channel_half_width {
            let n = normal_force(geom, -geom.channel_half_width - y_lo, -v.y);
            force += n * y_axis + friction_force(geom, n, v, &y_axis);
        }
        if y_hi > geom.channel_half_width {
            let n = normal_force(geom, y_hi - geom.channel_half_width, v.y);
            force += -n * y_axis + friction_force(geom, n, v, &y_axis);
        }
    }

    // End walls limiting the span, pushing the peg back inside.
    if p.z < geom.top_z {
        if x_lo < geom.channel_x0 && x_hi > geom.channel_x0 {
            let n = normal_force(geom, geom.channel_x0 - x_lo, -v.x);
            force += n * x_axis + friction_force(geom, n, v, &x_axis);
        }
        if x_hi > geom.channel_x1 && x_lo < geom.channel_x1 {
            let n = normal_force(geom, x_hi - geom.channel_x1, v.x);
            force += -n * x_axis + friction_force(geom, n, v, &x_axis);
        }
    }

    let lever = Vector3::from_column_slice(&geom.lever);
    let moment_world = lever.cross(&force);
    let rt = peg_pose.rotation.transpose();
    Wrench {
        force: rt * force,
        moment: rt * moment_world,
        frame: WrenchFrame::Sensor,
    }
}

// ---------------------------------------------------------------------------
// Sensor cell
// ---------------------------------------------------------------------------

/// Sensor timing and synthesis parameters around the plant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimCellConfig {
    pub plant: PlantConfig,
    pub geom: TaskGeometry,
    pub mass_model: MassModel,
    /// Multiplier on the compensation model's mass relative to the
    /// synthesized one; 1.0 means compensation cancels gravity exactly.
    pub mass_error_scale: f64,
    pub pose_period_s: f64,
    pub pose_delay_s: f64,
    pub wrench_period_s: f64,
    pub wrench_delay_s: f64,
    pub camera_period_s: f64,
    pub camera_delay_s: f64,
    pub image_size: usize,
    pub view: ViewConfig,
}

/// Serializable form of the camera window.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ViewConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for SimCellConfig {
    fn default() -> Self {
        SimCellConfig {
            plant: PlantConfig::default(),
            geom: TaskGeometry::default(),
            mass_model: MassModel::new(1.7, Vector3::new(0.0, 0.0, -0.06)),
            mass_error_scale: 1.0,
            pose_period_s: 0.012,
            // Delays sit strictly inside the control period so a sample's
            // availability instant never coincides with a read instant;
            // grid-aligned delays make visibility hinge on the rounding of
            // equal floating-point sums and drop samples quasi-periodically.
            pose_delay_s: 0.011,
            wrench_period_s: 1.0 / 60.0,
            wrench_delay_s: 0.019,
            camera_period_s: 1.0 / 60.0,
            camera_delay_s: 0.082,
            image_size: 96,
            view: ViewConfig {
                x_min: 0.010,
                x_max: 0.370,
                z_min: 0.000,
                z_max: 0.360,
            },
        }
    }
}

/// Raw streams captured at the sensors (used for demonstrations).
#[derive(Clone, Debug, Default)]
pub struct Capture {
    pub poses: Vec<StreamSample<Pose9D>>,
    pub wrenches: Vec<StreamSample<[f64; 6]>>,
    pub visuals: Vec<StreamSample<Vec<f64>>>,
}

/// The simulated cell: plant plus delayed sensor channels. Wrench messages
/// carry the raw (gravity-laden) sensor reading with the capture pose so
/// consumers can compensate; this cell performs that compensation when it
/// caches and records samples.
pub struct SimCell {
    pub cfg: SimCellConfig,
    plant: Plant,
    t0: Timestamp,
    pose_count: u64,
    wrench_count: u64,
    camera_count: u64,
    pose_ch: DelayedChannel<(Timestamp, Pose9D)>,
    wrench_ch: DelayedChannel<(Timestamp, [f64; 6])>,
    camera_ch: DelayedChannel<(Timestamp, GrayImage)>,
    latest_pose: Option<(Timestamp, Pose9D)>,
    latest_wrench: Option<(Timestamp, [f64; 6])>,
    latest_frame: Option<(Timestamp, GrayImage)>,
    capture: Option<Capture>,
    hog: HogParams,
}

impl SimCell {
    pub fn new(cfg: SimCellConfig, initial: &Pose9D, t0: Timestamp, record: bool) -> Self {
        let plant = Plant::new(cfg.plant, initial, t0);
        SimCell {
            pose_ch: DelayedChannel::new(Duration::from_secs(cfg.pose_delay_s)),
            wrench_ch: DelayedChannel::new(Duration::from_secs(cfg.wrench_delay_s)),
            camera_ch: DelayedChannel::new(Duration::from_secs(cfg.camera_delay_s)),
            cfg,
            plant,
            t0,
            pose_count: 0,
            wrench_count: 0,
            camera_count: 0,
            latest_pose: None,
            latest_wrench: None,
            latest_frame: None,
            capture: record.then(Capture::default),
            hog: HogParams::default(),
        }
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    fn view_bounds(&self) -> ViewBounds {
        ViewBounds {
            x_min: self.cfg.view.x_min,
            x_max: self.cfg.view.x_max,
            z_min: self.cfg.view.z_min,
            z_max: self.cfg.view.z_max,
        }
    }

    /// Side-view rendering of the fixture and the peg at a given TCP pose.
    pub fn render(&self, tcp: &Vector3<f64>) -> GrayImage {
        let g = &self.cfg.geom;
        let rects = [
            // Fixture body.
            ShadedRect {
                x0: g.body_x0,
                x1: g.body_x1,
                z0: 0.0,
                z1: g.top_z,
                shade: 0.55,
            },
            // Channel interior (the visible back wall of the cut).
            ShadedRect {
                x0: g.channel_x0,
                x1: g.channel_x1,
                z0: g.floor_z,
                z1: g.top_z,
                shade: 0.32,
            },
            // The peg.
            ShadedRect {
                x0: tcp.x - g.peg_width / 2.0,
                x1: tcp.x + g.peg_width / 2.0,
                z0: tcp.z,
                z1: tcp.z + g.peg_length,
                shade: 0.9,
            },
        ];
        rasterize(
            &self.view_bounds(),
            0.15,
            &rects,
            self.cfg.image_size,
            self.cfg.image_size,
        )
    }

    /// The raw wrench a sensor would read: synthesized gravity plus the
    /// contact wrench, both in the sensor frame.
    fn raw_sensor_wrench(&self) -> Wrench {
        let pose = self.plant.pose();
        let g = gravity_wrench_sensor(&self.cfg.mass_model, &pose);
        let c = contact_wrench(&self.cfg.geom, &pose, &self.plant.velocity());
        Wrench {
            force: g.force + c.force,
            moment: g.moment + c.moment,
            frame: WrenchFrame::Sensor,
        }
    }

    fn compensation_model(&self) -> MassModel {
        let mut m = self.cfg.mass_model;
        m.mass *= self.cfg.mass_error_scale;
        m
    }

    fn emit_due_sensors(&mut self) {
        // A nanosecond of slack absorbs rounding drift between the sensor
        // grids and the plant's step grid.
        let now = self.plant.now() + Duration::from_secs(1e-9);
        loop {
            let next = self.t0 + Duration::from_secs(self.pose_count as f64 * self.cfg.pose_period_s);
            if next > now {
                break;
            }
            let sample = (next, self.plant.pose9d());
            self.pose_ch.send(sample.clone(), next);
            if let Some(c) = self.capture.as_mut() {
                c.poses.push(StreamSample::new(next, sample.1));
            }
            self.pose_count += 1;
        }
        loop {
            let next =
                self.t0 + Duration::from_secs(self.wrench_count as f64 * self.cfg.wrench_period_s);
            if next > now {
                break;
            }
            let raw = self.raw_sensor_wrench();
            self.wrench_ch.send((next, raw.as_array()), next);
            let pose = self.plant.pose();
            let model = self.compensation_model();
            if let Some(c) = self.capture.as_mut() {
                let ext = compensate(&raw, &pose, &model).expect("sensor-frame reading");
                c.wrenches.push(StreamSample::new(next, ext.as_array()));
            }
            self.wrench_count += 1;
        }
        loop {
            let next =
                self.t0 + Duration::from_secs(self.camera_count as f64 * self.cfg.camera_period_s);
            if next > now {
                break;
            }
            let frame = self.render(&self.plant.position());
            if let Some(c) = self.capture.as_mut() {
                let features = hog_encode(&frame, &self.hog).expect("valid camera geometry");
                c.visuals.push(StreamSample::new(next, features));
            }
            self.camera_ch.send((next, frame), next);
            self.camera_count += 1;
        }
    }

    fn receive(&mut self, t: Timestamp) {
        if let Some(last) = self.pose_ch.poll(t).into_iter().last() {
            self.latest_pose = Some(last);
        }
        if let Some((ts, raw)) = self.wrench_ch.poll(t).into_iter().last() {
            // Compensate with the capture-time pose carried next to it. The
            // pose cache may lag a cycle; orientation is rigid here so the
            // gravity term depends only on the (constant) rotation.
            let pose = self
                .latest_pose
                .as_ref()
                .map(|(_, p)| crate::geometry::pose_from_9d(p).unwrap_or_else(|_| self.plant.pose()))
                .unwrap_or_else(|| self.plant.pose());
            let raw_w = Wrench::from_array(&raw, WrenchFrame::Sensor);
            let ext = compensate(&raw_w, &pose, &self.compensation_model())
                .expect("sensor-frame reading");
            self.latest_wrench = Some((ts, ext.as_array()));
        }
        if let Some(last) = self.camera_ch.poll(t).into_iter().last() {
            self.latest_frame = Some(last);
        }
    }

    /// Advances plant and sensors to time `t`, then delivers everything the
    /// channels make available by `t`.
    pub fn advance_to(&mut self, t: Timestamp) {
        let limit = t + Duration::from_secs(self.cfg.plant.step_s / 2.0);
        while self.plant.now_after(1) <= limit {
            self.plant.step_once(Some(&self.cfg.geom));
            self.emit_due_sensors();
        }
        self.receive(t);
    }

    pub fn send_command(&mut self, t: Timestamp, setpoint: &Pose9D) {
        self.plant.send_command(t, setpoint);
    }

    pub fn latest_pose(&self) -> Option<&(Timestamp, Pose9D)> {
        self.latest_pose.as_ref()
    }

    pub fn latest_wrench(&self) -> Option<&(Timestamp, [f64; 6])> {
        self.latest_wrench.as_ref()
    }

    pub fn latest_frame(&self) -> Option<&(Timestamp, GrayImage)> {
        self.latest_frame.as_ref()
    }

    pub fn take_capture(&mut self) -> Option<Capture> {
        self.capture.take()
    }

    pub fn hog_params(&self) -> &HogParams {
        &self.hog
    }
}

// ---------------------------------------------------------------------------
// Scripted demonstrator
// ---------------------------------------------------------------------------

/// Demonstrator waypoints, speeds, and force thresholds; per-demo values
/// are jittered from a seeded generator.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// Start-pose jitter amplitude in x and z, m.
    pub start_jitter: f64,
    /// Jitter on the descent station along the channel axis, m.
    pub entry_jitter: f64,
    /// Hover altitude for the approach, m (absolute z).
    pub hover_z: f64,
    /// Feedforward stop height above the channel floor for the fast
    /// descent, m; the force-guarded creep covers the remainder.
    pub descend_margin: f64,
    pub v_approach: f64,
    pub v_descend: f64,
    /// Creep speed for the guarded final descent, m/s.
    pub v_creep: f64,
    /// Sliding speed along the channel axis, m/s.
    pub v_slide: f64,
    /// Acceleration bound for the free-space waypoint moves, m/s^2.
    pub accel: f64,
    /// Distance before the goal over which the slide decelerates, m.
    pub slide_decel_window: f64,
    /// Slide speed floor inside the deceleration window, m/s.
    pub slide_v_end: f64,
    /// Relative jitter applied to each speed and to the force targets.
    pub speed_jitter_frac: f64,
    /// Sensed force that ends the guarded descent, N. Kept light so the
    /// demonstrator is never parked while pressing: full contact force is
    /// built up by the vertical regulator during the sweep, which keeps
    /// every loaded sample in the recordings a moving one.
    pub touch_force: f64,
    /// Reference contact force for the sliding regulator, N.
    pub contact_force: f64,
    /// Regulated sliding force as a fraction of the breakthrough force;
    /// keeping it below 1 separates the pressing and sliding regimes in
    /// the recorded wrench signals.
    pub slide_force_frac: f64,
    /// Relative amplitude of the slow force-target sweep along the slide.
    /// Each demonstration presses harder and lighter at different stations
    /// (random phase per demo), so the recorded corrections cover a band of
    /// contact forces at every point of the channel instead of a single
    /// settled level.
    pub slide_force_dither_frac: f64,
    /// Spatial wavelength of the force-target sweep, m.
    pub slide_force_dither_wavelength: f64,
    /// Vertical force-regulation gain while sliding, (m/s)/N: the setpoint
    /// climbs when the sensed force exceeds the target and presses when it
    /// falls short, so demonstrations encode corrective contact behavior.
    pub servo_gain: f64,
    /// Clamp on the regulation speed, m/s.
    pub servo_vmax: f64,
    /// Probability that a demonstration includes press pulses at all; keeping
    /// pulses in a minority of demonstrations stops the pulse onsets from
    /// dominating retrieval blends at ordinary contact levels.
    pub press_pulse_prob: f64,
    /// Number of deliberate press pulses per pulsing demonstration: short
    /// stretches where the demonstrator leans in well past the usual force
    /// band and then recovers, so the recordings include fast corrections
    /// away from excessive contact and not just gentle band-keeping.
    pub press_pulse_count: usize,
    /// Force-target multiplier applied inside a press pulse.
    pub press_pulse_mult: f64,
    /// Spatial half-width of a press pulse along the channel, m.
    pub press_pulse_halfwidth: f64,
    /// Time over which the sliding force target ramps up from the touch
    /// level after first contact, s. A gradual lean-in keeps the recorded
    /// transition from free motion to loaded sliding smooth enough that
    /// replaying it with a time offset stays gentle as well.
    pub force_build_s: f64,
    /// Sensed force, as a fraction of the breakthrough force, beyond which
    /// the demonstrator flinches upward regardless of the current target.
    pub alarm_force_frac: f64,
    /// Extra lift rate per newton above the alarm level, (m/s)/N.
    pub flinch_gain: f64,
    pub hold_duration_s: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            start_jitter: 0.002,
            entry_jitter: 0.001,
            hover_z: 0.130,
            descend_margin: 0.005,
            v_approach: 0.050,
            v_descend: 0.028,
            v_creep: 0.002,
            v_slide: 0.022,
            accel: 0.12,
            slide_decel_window: 0.015,
            slide_v_end: 0.006,
            speed_jitter_frac: 0.08,
            touch_force: 6.0,
            contact_force: 38.0,
            slide_force_frac: 0.4,
            slide_force_dither_frac: 0.25,
            slide_force_dither_wavelength: 0.30,
            servo_gain: 9.0e-5,
            servo_vmax: 0.005,
            press_pulse_prob: 0.5,
            press_pulse_count: 1,
            press_pulse_mult: 3.9,
            press_pulse_halfwidth: 0.003,
            force_build_s: 1.0,
            alarm_force_frac: 1.35,
            flinch_gain: 5.0e-4,
            hold_duration_s: 0.8,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum ExpertPhase {
    Approach,
    Descend,
    Creep,
    Slide,
    Hold { until: Timestamp },
    Done,
}

/// Waypoint demonstrator: approach above the channel, descend, creep until
/// contact is sensed, then slide along the axis to the goal while
/// regulating the contact force vertically, and hold. Translation-only.
pub struct Expert {
    phase: ExpertPhase,
    setpoint: Vector3<f64>,
    rot6d: [f64; 6],
    hover: Vector3<f64>,
    descend_z: f64,
    goal_x: f64,
    v_approach: f64,
    v_descend: f64,
    v_creep: f64,
    v_slide: f64,
    accel: f64,
    cur_speed: f64,
    slide_decel_window: f64,
    slide_v_end: f64,
    force_threshold: f64,
    servo_target: f64,
    dither_frac: f64,
    dither_wavenumber: f64,
    dither_phase: f64,
    slide_origin_x: f64,
    floor_slope: f64,
    touch_force: f64,
    force_build_s: f64,
    slide_elapsed: f64,
    pulse_centers: Vec<f64>,
    pulse_halfwidth: f64,
    pulse_mult: f64,
    alarm_force: f64,
    flinch_gain: f64,
    servo_gain: f64,
    servo_vmax: f64,
    hold_duration: Duration,
}

impl Expert {
    /// Builds the demonstrator and its jittered start pose for one seed.
    pub fn new(cfg: &ExpertConfig, geom: &TaskGeometry, seed: u64) -> (Expert, Pose9D) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jit = |rng: &mut ChaCha8Rng, a: f64| rng.gen_range(-a..=a);
        let speed = |rng: &mut ChaCha8Rng, v: f64, f: f64| v * (1.0 + jit(rng, f));

        let start = Vector3::new(
            geom.start[0] + jit(&mut rng, cfg.start_jitter),
            geom.start[1],
            geom.start[2] + jit(&mut rng, cfg.start_jitter),
        );
        let hover = Vector3::new(
            geom.entry_x + jit(&mut rng, cfg.entry_jitter),
            geom.start[1],
            cfg.hover_z,
        );
        let start_pose = pose_to_9d(&Pose::from_position(start));
        let expert = Expert {
            phase: ExpertPhase::Approach,
            setpoint: start,
            rot6d: start_pose.rot6d,
            hover,
            descend_z: geom.floor_z_at(hover.x) + cfg.descend_margin,
            goal_x: geom.goal[0],
            v_approach: speed(&mut rng, cfg.v_approach, cfg.speed_jitter_frac),
            v_descend: speed(&mut rng, cfg.v_descend, cfg.speed_jitter_frac),
            v_creep: speed(&mut rng, cfg.v_creep, cfg.speed_jitter_frac),
            v_slide: speed(&mut rng, cfg.v_slide, cfg.speed_jitter_frac),
            accel: cfg.accel,
            cur_speed: 0.0,
            slide_decel_window: cfg.slide_decel_window,
            slide_v_end: cfg.slide_v_end,
            force_threshold: cfg.touch_force
                * (1.0 + jit(&mut rng, cfg.speed_jitter_frac)),
            servo_target: cfg.contact_force
                * cfg.slide_force_frac
                * (1.0 + jit(&mut rng, cfg.speed_jitter_frac)),
            dither_frac: cfg.slide_force_dither_frac,
            dither_wavenumber: std::f64::consts::TAU / cfg.slide_force_dither_wavelength,
            dither_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            slide_origin_x: hover.x,
            floor_slope: geom.floor_slope(),
            touch_force: cfg.touch_force,
            force_build_s: cfg.force_build_s,
            slide_elapsed: 0.0,
            pulse_centers: {
                let n = if rng.gen_bool(cfg.press_pulse_prob) { cfg.press_pulse_count } else { 0 };
                (0..n)
                    .map(|_| rng.gen_range(hover.x + 0.025..geom.goal[0] - 0.030))
                    .collect()
            },
            pulse_halfwidth: cfg.press_pulse_halfwidth,
            pulse_mult: cfg.press_pulse_mult,
            alarm_force: cfg.contact_force * cfg.alarm_force_frac,
            flinch_gain: cfg.flinch_gain,
            servo_gain: cfg.servo_gain,
            servo_vmax: cfg.servo_vmax,
            hold_duration: Duration::from_secs(cfg.hold_duration_s),
        };
        (expert, start_pose)
    }

    pub fn done(&self) -> bool {
        matches!(self.phase, ExpertPhase::Done)
    }

    /// Vertical setpoint correction toward the force target: climbs when
    /// pressing too hard, presses when contact is light or lost.
    fn regulate_force(&mut self, sensed_force: f64, target: f64, dt: f64) {
        let rate = self.servo_gain * (sensed_force - target);
        self.setpoint.z += rate.clamp(-self.servo_vmax, self.servo_vmax) * dt;
    }

    /// True inside one of this demonstration's deliberate press pulses.
    fn in_press_pulse(&self) -> bool {
        self.pulse_centers
            .iter()
            .any(|c| (self.setpoint.x - c).abs() < self.pulse_halfwidth)
    }

    /// Force target while sliding: the base level swept by a slow spatial
    /// sinusoid whose phase differs per demonstration, ramped in gradually
    /// after first contact and overridden by a much firmer level inside a
    /// press pulse.
    fn slide_force_target(&self) -> f64 {
        if self.in_press_pulse() {
            return self.servo_target * self.pulse_mult;
        }
        let arg = self.dither_wavenumber * (self.setpoint.x - self.slide_origin_x)
            + self.dither_phase;
        let band = self.servo_target * (1.0 + self.dither_frac * arg.sin());
        let ramp = (self.slide_elapsed / self.force_build_s).min(1.0);
        self.touch_force + (band - self.touch_force) * ramp
    }

    /// One trapezoid-profiled step toward the target: speed ramps at the
    /// acceleration bound and obeys the stopping parabola toward the exit
    /// speed, so waypoint segments start and end smoothly.
    fn move_profiled(&mut self, target: &Vector3<f64>, v_max: f64, v_out: f64, dt: f64) -> bool {
        let delta = target - self.setpoint;
        let dist = delta.norm();
        let v_stop = (v_out * v_out + 2.0 * self.accel * dist).sqrt();
        let v_cap = v_max.min(v_stop);
        self.cur_speed = (self.cur_speed + self.accel * dt).min(v_cap);
        let step = self.cur_speed * dt;
        if dist <= step {
            self.setpoint = *target;
            true
        } else {
            self.setpoint += delta * (step / dist);
            false
        }
    }

    /// Advances the setpoint by one command period given the latest sensed
    /// external force magnitude.
    pub fn next_setpoint(&mut self, now: Timestamp, dt: f64, sensed_force: f64) -> Pose9D {
        match self.phase {
            ExpertPhase::Approach => {
                let hover = self.hover;
                if self.move_profiled(&hover, self.v_approach, 0.01, dt) {
                    self.phase = ExpertPhase::Descend;
                }
            }
            ExpertPhase::Descend => {
                let target = Vector3::new(self.hover.x, self.hover.y, self.descend_z);
                if self.move_profiled(&target, self.v_descend, self.v_creep, dt) {
                    self.phase = ExpertPhase::Creep;
                }
            }
            ExpertPhase::Creep => {
                self.setpoint.z -= self.v_creep * dt;
                if sensed_force >= self.force_threshold {
                    self.phase = ExpertPhase::Slide;
                }
            }
            ExpertPhase::Slide => {
                self.slide_elapsed += dt;
                let target = self.slide_force_target();
                self.regulate_force(sensed_force, target, dt);
                if sensed_force > self.alarm_force && !self.in_press_pulse() {
                    self.setpoint.z += self.flinch_gain * (sensed_force - self.alarm_force) * dt;
                }
                let remaining = (self.goal_x - self.setpoint.x).max(0.0);
                let frac = (remaining / self.slide_decel_window).min(1.0);
                let v_cap = (self.v_slide * frac).max(self.slide_v_end);
                self.cur_speed = (self.cur_speed + self.accel * dt).min(v_cap);
                self.setpoint.x += self.cur_speed * dt;
                self.setpoint.z -= self.floor_slope * self.cur_speed * dt;
                if self.setpoint.x >= self.goal_x {
                    self.setpoint.x = self.goal_x;
                    self.phase = ExpertPhase::Hold {
                        until: now + self.hold_duration,
                    };
                }
            }
            ExpertPhase::Hold { until } => {
                self.regulate_force(sensed_force, self.servo_target, dt);
                if now >= until {
                    self.phase = ExpertPhase::Done;
                }
            }
            ExpertPhase::Done => {}
        }
        Pose9D {
            position: self.setpoint,
            rot6d: self.rot6d,
        }
    }
}

/// One recorded demonstration: raw capture streams plus episode metadata.
pub struct DemoRun {
    pub capture: Capture,
    pub duration: Duration,
    pub final_position: Vector3<f64>,
}

/// Runs the scripted demonstrator for one seed on a fresh cell, recording
/// all sensor streams at capture time.
pub fn run_demo(
    cell_cfg: &SimCellConfig,
    expert_cfg: &ExpertConfig,
    seed: u64,
    horizon: Duration,
) -> Result<DemoRun, SimError> {
    cell_cfg.geom.validate()?;
    let (mut expert, start_pose) = Expert::new(expert_cfg, &cell_cfg.geom, seed);
    let mut cell = SimCell::new(cell_cfg.clone(), &start_pose, Timestamp::ZERO, true);
    let dt = cell_cfg.pose_period_s;
    let mut cycle: u64 = 0;
    loop {
        let t = Timestamp::ZERO + Duration::from_secs(cycle as f64 * dt);
        if t > Timestamp::ZERO + horizon {
            break;
        }
        cell.advance_to(t);
        let sensed = cell
            .latest_wrench()
            .map(|(_, w)| Vector3::new(w[0], w[1], w[2]).norm())
            .unwrap_or(0.0);
        let sp = expert.next_setpoint(t, dt, sensed);
        cell.send_command(t, &sp);
        if expert.done() {
            break;
        }
        cycle += 1;
    }
    // Let the plant settle through its delay line so the recorded streams
    // include the final seated state.
    let end = cell.plant().now() + Duration::from_secs(0.6);
    cell.advance_to(end);

    let final_position = cell.plant().position();
    let distance = (final_position - cell_cfg.geom.goal_vec()).norm();
    if distance > 2e-3 {
        return Err(SimError::ExpertFailed { seed, distance });
    }
    let duration = cell.plant().now() - Timestamp::ZERO;
    Ok(DemoRun {
        capture: cell.take_capture().expect("recording enabled"),
        duration,
        final_position,
    })
}

// ---------------------------------------------------------------------------
// Hand-controller mapping
// ---------------------------------------------------------------------------

/// One sample of a recorded hand-controller stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControllerSample {
    pub t: f64,
    pub position: [f64; 3],
    /// Orientation as (w, x, y, z).
    pub quat_wxyz: [f64; 4],
    pub trigger: bool,
}

impl ControllerSample {
    pub fn pose(&self) -> Pose {
        Pose::from_quaternion_wxyz(Vector3::from_column_slice(&self.position), self.quat_wxyz)
    }
}

/// Reads a controller stream from JSONL (one sample per line).
pub fn load_controller_stream(path: &std::path::Path) -> Result<Vec<ControllerSample>, SimError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

/// Maps a hand-controller stream to robot setpoints. While the trigger is
/// held, hand motion relative to the latch point is applied to the latched
/// robot pose: rotations through the exponential map scaled by `alpha`,
/// translations scaled by `beta`. Releasing emits nothing; re-pressing
/// re-latches both frames, so motion resumes without a jump.
pub fn teleop_map(
    stream: &[ControllerSample],
    robot_ref: &Pose,
    alpha: f64,
    beta: f64,
) -> Result<Vec<(Timestamp, Pose)>, SimError> {
    if alpha <= 0.0 || beta <= 0.0 {
        return Err(SimError::InvalidConfig("alpha and beta must be positive".into()));
    }
    let mut out: Vec<(Timestamp, Pose)> = Vec::new();
    let mut latch: Option<(Pose, Pose)> = None; // (hand at latch, robot at latch)
    let mut last_robot = *robot_ref;
    for s in stream {
        if !s.trigger {
            latch = None;
            continue;
        }
        let hand = s.pose();
        let (hand0, robot0) = match &latch {
            Some(l) => l.clone(),
            None => {
                let l = (hand.clone(), last_robot.clone());
                latch = Some(l.clone());
                l
            }
        };
        let delta_r = hand0.rotation.transpose() * hand.rotation;
        let w = so3_log(&delta_r)?;
        let rotation = robot0.rotation * so3_exp(&(alpha * w));
        let position = robot0.position + beta * (hand.position - hand0.position);
        let pose = Pose::new(position, rotation);
        last_robot = pose.clone();
        out.push((Timestamp::from_secs(s.t), pose));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::sensing::estimate_execution_latency;

    fn ts(s: f64) -> Timestamp {
        Timestamp::from_secs(s)
    }

    fn pose9(x: f64, y: f64, z: f64) -> Pose9D {
        pose_to_9d(&Pose::from_position(Vector3::new(x, y, z)))
    }

    // --- plant -----------------------------------------------------------------

    #[test]
    fn step_response_matches_discrete_first_order_law() {
        let cfg = PlantConfig::default();
        let mut plant = Plant::new(cfg, &pose9(0.0, 0.0, 0.0), Timestamp::ZERO);
        // A second command at the same timestamp is a clean step.
        plant.send_command(Timestamp::ZERO, &pose9(1.0, 0.0, 0.0));

        let h = cfg.step_s;
        let a = 1.0 - h / cfg.tracking_tau_s;
        // Before the delay expires nothing moves.
        plant.advance_to(ts(0.224), None);
        assert_eq!(plant.position().x, 0.0);
        // k steps after the step becomes visible: x = 1 - a^k.
        for k in [1u32, 5, 40, 200] {
            let mut p = Plant::new(cfg, &pose9(0.0, 0.0, 0.0), Timestamp::ZERO);
            p.send_command(Timestamp::ZERO, &pose9(1.0, 0.0, 0.0));
            p.advance_to(ts(0.225 + k as f64 * h), None);
            let expect = 1.0 - a.powi(k as i32);
            assert_relative_eq!(p.position().x, expect, epsilon = 1e-12);
            // And the continuous first-order response is tracked closely.
            let cont = 1.0 - (-(k as f64 * h) / cfg.tracking_tau_s).exp();
            assert!((p.position().x - cont).abs() < 0.02);
        }
    }

    #[test]
    fn ramp_tracking_shift_is_the_composite_delay_for_all_speeds() {
        let cfg = PlantConfig::default();
        let composite = cfg.pure_delay_s + cfg.tracking_tau_s;
        let mut estimates = Vec::new();
        for &v in &[0.005, 0.01, 0.02, 0.04] {
            let mut plant = Plant::new(cfg, &pose9(0.0, 0.0, 0.0), Timestamp::ZERO);
            let mut commanded = Vec::new();
            let mut tracked = Vec::new();
            for k in 0..500u64 {
                let t = k as f64 * 0.012;
                plant.advance_to(ts(t), None);
                plant.send_command(ts(t), &pose9(v * t, 0.0, 0.0));
                if t >= 2.5 {
                    commanded.push((t, v * t));
                    tracked.push((t, plant.position().x));
                }
            }
            let d = estimate_execution_latency(&commanded, &tracked).unwrap();
            assert!(
                (d.secs() - composite).abs() < 1e-9,
                "speed {v}: estimate {} vs {}",
                d.secs(),
                composite
            );
            estimates.push(d.secs());
        }
        let spread = estimates.iter().cloned().fold(f64::MIN, f64::max)
            - estimates.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 1e-3, "shift varies with ramp speed: {spread}");
    }

    #[test]
    fn unchanged_command_is_a_fixed_point() {
        let cfg = PlantConfig::default();
        let initial = pose9(0.3, -0.1, 0.25);
        let mut plant = Plant::new(cfg, &initial, Timestamp::ZERO);
        plant.advance_to(ts(1.0), None);
        assert_eq!(plant.position(), initial.position);
        assert_eq!(plant.velocity(), Vector3::zeros());
    }

    #[test]
    fn zero_tau_tracks_the_delayed_command_exactly() {
        let cfg = PlantConfig {
            tracking_tau_s: 0.0,
            pure_delay_s: 0.0,
            ..PlantConfig::default()
        };
        let mut plant = Plant::new(cfg, &pose9(0.0, 0.0, 0.0), Timestamp::ZERO);
        for k in 0..=200u64 {
            let t = k as f64 * 0.012;
            plant.advance_to(ts(t), None);
            plant.send_command(ts(t), &pose9(0.01 * t, 0.0, 0.0));
        }
        // Past the end of the history the setpoint clamps to the last command.
        plant.advance_to(ts(2.5), None);
        assert_relative_eq!(plant.position().x, 0.01 * 2.4, epsilon = 1e-9);
    }

    #[test]
    fn plant_is_deterministic() {
        let run = || {
            let cfg = PlantConfig::default();
            let geom = TaskGeometry::default();
            let mut plant = Plant::new(cfg, &pose9(0.22, 0.0, 0.061), Timestamp::ZERO);
            let mut trace = Vec::new();
            for k in 0..300u64 {
                let t = k as f64 * 0.012;
                plant.advance_to(ts(t), Some(&geom));
                plant.send_command(ts(t), &pose9(0.22, 0.0, 0.061 - 1e-5 * k as f64));
                trace.push(plant.position());
            }
            trace
        };
        assert_eq!(run(), run());
    }

    // --- contact ---------------------------------------------------------------

    #[test]
    fn peg_above_the_channel_floor_feels_nothing() {
        let g = TaskGeometry::default();
        let pose = Pose::from_position(Vector3::new(g.entry_x, 0.0, g.floor_z + 0.001));
        let w = contact_wrench(&g, &pose, &Vector3::zeros());
        assert_eq!(w.force, Vector3::zeros());
        assert_eq!(w.moment, Vector3::zeros());
    }

    #[test]
    fn one_millimeter_floor_penetration_gives_fifty_newtons() {
        let g = TaskGeometry::default();
        let pose = Pose::from_position(Vector3::new(g.entry_x, 0.0, g.floor_z - 0.001));
        let w = contact_wrench(&g, &pose, &Vector3::zeros());
        assert_relative_eq!(w.force.z, 50.0, epsilon = 1e-9);
        assert_relative_eq!(w.force.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(w.force.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn sliding_friction_opposes_motion_at_the_coulomb_level() {
        let g = TaskGeometry::default();
        let pose = Pose::from_position(Vector3::new(g.entry_x, 0.0, g.floor_z - 0.001));
        let v = Vector3::new(0.1, 0.0, 0.0);
        let w = contact_wrench(&g, &pose, &v);
        assert_relative_eq!(w.force.z, 50.0, epsilon = 1e-9);
        assert!(w.force.x < 0.0, "friction must oppose +x sliding");
        assert!((w.force.x.abs() - 20.0).abs() < 0.05, "got {}", w.force.x);
    }

    #[test]
    fn side_wall_pushes_back_and_moment_is_lever_cross_force() {
        let g = TaskGeometry::default();
        // Peg edge 0.5 mm into the +y wall, tip inside the channel but
        // above the floor.
        let y = g.channel_half_width - g.peg_width / 2.0 + 0.0005;
        let pose = Pose::from_position(Vector3::new(g.entry_x, y, g.floor_z + 0.005));
        let w = contact_wrench(&g, &pose, &Vector3::zeros());
        assert_relative_eq!(w.force.y, -25.0, epsilon = 1e-9);
        assert_relative_eq!(w.force.z, 0.0, epsilon = 1e-12);
        let lever = Vector3::from_column_slice(&g.lever);
        let expect = lever.cross(&w.force);
        assert_relative_eq!(w.moment.x, expect.x, epsilon = 1e-12);
        assert_relative_eq!(w.moment.y, expect.y, epsilon = 1e-12);
        assert_relative_eq!(w.moment.z, expect.z, epsilon = 1e-12);
    }

    #[test]
    fn end_wall_pushes_a_straddling_peg_back_into_the_span() {
        let g = TaskGeometry::default();
        // Trailing edge 0.5 mm behind the span start, just below the rim.
        let x = g.channel_x0 + g.peg_width / 2.0 - 0.0005;
        let pose = Pose::from_position(Vector3::new(x, 0.0, g.top_z - 0.001));
        let w = contact_wrench(&g, &pose, &Vector3::zeros());
        assert_relative_eq!(w.force.x, 25.0, epsilon = 1e-9);
        // The sliver still over the body face contributes its width share.
        let expect_z = 0.0005 / g.peg_width * g.stiffness * 0.001;
        assert_relative_eq!(w.force.z, expect_z, epsilon = 1e-9);
    }

    #[test]
    fn body_top_support_scales_with_overlap() {
        let g = TaskGeometry::default();
        // Peg fully over the left body face, 1 mm penetration.
        let pose_full = Pose::from_position(Vector3::new(0.125, 0.0, g.top_z - 0.001));
        let full = contact_wrench(&g, &pose_full, &Vector3::zeros());
        assert_relative_eq!(full.force.z, 50.0, epsilon = 1e-9);
        // Half the peg hangs past the outer body edge: half the support.
        let pose_half = Pose::from_position(Vector3::new(g.body_x0, 0.0, g.top_z - 0.001));
        let half = contact_wrench(&g, &pose_half, &Vector3::zeros());
        assert_relative_eq!(half.force.z, 25.0, epsilon = 1e-9);
    }

    #[test]
    fn resting_without_motion_or_penetration_stays_force_free() {
        let g = TaskGeometry::default();
        let cfg = PlantConfig::default();
        let start = pose9(g.entry_x, 0.0, g.floor_z + 0.002);
        let mut plant = Plant::new(cfg, &start, Timestamp::ZERO);
        for k in 0..400u64 {
            plant.advance_to(ts(k as f64 * 0.012), Some(&g));
            let w = contact_wrench(&g, &plant.pose(), &plant.velocity());
            assert_eq!(w.force, Vector3::zeros());
        }
        assert_eq!(plant.position(), start.position);
    }

    #[test]
    fn press_equilibrium_force_matches_closed_form() {
        // Setpoint held d below the floor: the tracking pull balances the
        // mobility-scaled normal force at penetration d / (1 + tau*mobility*k).
        let g = TaskGeometry::default();
        let cfg = PlantConfig::default();
        let d = 0.00252;
        let start = pose9(g.entry_x, 0.0, g.floor_z + 0.01);
        let mut plant = Plant::new(cfg, &start, Timestamp::ZERO);
        plant.send_command(Timestamp::ZERO, &pose9(g.entry_x, 0.0, g.floor_z - d));
        plant.advance_to(ts(5.0), Some(&g));
        let gain = 1.0 + cfg.tracking_tau_s * cfg.mobility * g.stiffness;
        let pen = g.floor_z - plant.position().z;
        assert_relative_eq!(pen, d / gain, max_relative = 0.02);
        let n = contact_wrench(&g, &plant.pose(), &plant.velocity()).force.z;
        assert_relative_eq!(n, g.stiffness * d / gain, max_relative = 0.05);
    }

    // --- demonstrator --------------------------------------------------------------

    #[test]
    fn demo_reaches_goal_within_band_and_is_deterministic() {
        let cell = SimCellConfig::default();
        let expert = ExpertConfig::default();
        let run1 = run_demo(&cell, &expert, 7, Duration::from_secs(30.0)).unwrap();
        assert!(
            (run1.final_position - cell.geom.goal_vec()).norm() < 2e-3,
            "final {:?}",
            run1.final_position
        );
        let d = run1.duration.secs();
        assert!((9.0..=18.0).contains(&d), "duration {d}");

        let run2 = run_demo(&cell, &expert, 7, Duration::from_secs(30.0)).unwrap();
        assert_eq!(run1.capture.poses, run2.capture.poses);
        assert_eq!(run1.capture.wrenches, run2.capture.wrenches);

        let run3 = run_demo(&cell, &expert, 8, Duration::from_secs(30.0)).unwrap();
        assert_ne!(run1.capture.poses, run3.capture.poses);
    }

    #[test]
    fn demo_forces_stay_bounded() {
        let cell = SimCellConfig::default();
        let expert = ExpertConfig::default();
        let run = run_demo(&cell, &expert, 3, Duration::from_secs(30.0)).unwrap();
        let max_f = run
            .capture
            .wrenches
            .iter()
            .map(|s| Vector3::new(s.value[0], s.value[1], s.value[2]).norm())
            .fold(0.0, f64::max)
            ;
        assert!(max_f > 20.0, "demo never made real contact: {max_f}");
        assert!(max_f < 200.0, "unbounded contact force: {max_f}");
    }

    // --- teleoperation ---------------------------------------------------------------

    fn hand(t: f64, p: [f64; 3], rot_z_deg: f64, trigger: bool) -> ControllerSample {
        let r = so3_exp(&Vector3::new(0.0, 0.0, rot_z_deg.to_radians()));
        let pose = Pose::new(Vector3::from_column_slice(&p), r);
        let q = pose.to_quaternion_wxyz();
        ControllerSample {
            t,
            position: p,
            quat_wxyz: q,
            trigger,
        }
    }

    #[test]
    fn translation_scales_with_beta() {
        let stream = vec![
            hand(0.0, [0.0, 0.0, 0.0], 0.0, true),
            hand(0.1, [0.10, 0.0, 0.0], 0.0, true),
        ];
        let rr = Pose::from_position(Vector3::new(0.5, 0.0, 0.3));
        let out = teleop_map(&stream, &rr, 1.0, 1.0).unwrap();
        assert_relative_eq!(out[1].1.position.x, 0.60, epsilon = 1e-12);
        let out_half = teleop_map(&stream, &rr, 1.0, 0.5).unwrap();
        assert_relative_eq!(out_half[1].1.position.x, 0.55, epsilon = 1e-12);
    }

    #[test]
    fn rotation_scales_through_the_exponential_map() {
        let stream = vec![
            hand(0.0, [0.0, 0.0, 0.0], 0.0, true),
            hand(0.1, [0.0, 0.0, 0.0], 90.0, true),
        ];
        let out = teleop_map(&stream, &Pose::identity(), 0.5, 1.0).unwrap();
        let w = so3_log(&out[1].1.rotation).unwrap();
        assert_relative_eq!(w.z, 45.0_f64.to_radians(), epsilon = 1e-9);
        assert_relative_eq!(w.x, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn release_and_repress_never_jump() {
        let stream = vec![
            hand(0.0, [0.0, 0.0, 0.0], 0.0, true),
            hand(0.1, [0.05, 0.0, 0.0], 0.0, true),
            // Released: the hand wanders far away.
            hand(0.2, [0.50, 0.2, -0.1], 30.0, false),
            // Re-pressed: motion resumes relative to the new hand pose.
            hand(0.3, [0.50, 0.2, -0.1], 30.0, true),
            hand(0.4, [0.52, 0.2, -0.1], 30.0, true),
        ];
        let out = teleop_map(&stream, &Pose::identity(), 1.0, 1.0).unwrap();
        assert_eq!(out.len(), 4);
        // The re-latch tick emits exactly the last pose (no jump).
        assert_relative_eq!(out[2].1.position.x, out[1].1.position.x, epsilon = 1e-12);
        // And the subsequent hand delta applies from there.
        assert_relative_eq!(out[3].1.position.x, out[1].1.position.x + 0.02, epsilon = 1e-12);
    }

    #[test]
    fn half_turn_rotation_is_rejected() {
        let stream = vec![
            hand(0.0, [0.0, 0.0, 0.0], 0.0, true),
            hand(0.1, [0.0, 0.0, 0.0], 180.0, true),
        ];
        assert!(teleop_map(&stream, &Pose::identity(), 1.0, 1.0).is_err());
    }

    #[test]
    fn controller_stream_round_trips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stream.jsonl");
        let stream = vec![
            hand(0.0, [0.1, 0.2, 0.3], 15.0, true),
            hand(0.1, [0.2, 0.2, 0.3], 30.0, false),
        ];
        let text: String = stream
            .iter()
            .map(|s| serde_json::to_string(s).unwrap() + "\n")
            .collect();
        std::fs::write(&path, text).unwrap();
        let back = load_controller_stream(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].position, [0.1, 0.2, 0.3]);
        assert!(!back[1].trigger);
    }
}
