//! Evaluation metrics over timestamped rollout logs.
//!
//! Signals are treated as piecewise-linear in time. RMS values use the
//! exact closed-form integral of the squared interpolant (time-weighted, so
//! nonuniform sampling is handled correctly). Derivatives use three-point
//! Lagrange stencils with nonuniform spacing, central where possible and
//! one-sided at the ends, which are exact for quadratic signals.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("timestamp and value lengths differ: {t} vs {v}")]
    MismatchedLengths { t: usize, v: usize },
    #[error("timestamps are not strictly increasing at index {0}")]
    UnsortedTimestamps(usize),
    #[error("interval union has zero length")]
    EmptyIntervalUnion,
    #[error("interval [{a}, {b}] outside signal span [{t0}, {t1}]")]
    IntervalOutOfSpan { a: f64, b: f64, t0: f64, t1: f64 },
    #[error("start and goal coincide; progression undefined")]
    DegenerateGoal,
}

/// Scalar signal sampled at strictly increasing times.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarSeries {
    t: Vec<f64>,
    v: Vec<f64>,
}

/// 3-vector signal sampled at strictly increasing times.
#[derive(Clone, Debug, PartialEq)]
pub struct Vec3Series {
    t: Vec<f64>,
    v: Vec<Vector3<f64>>,
}

fn check_times(t: &[f64]) -> Result<(), MetricsError> {
    if t.is_empty() {
        return Err(MetricsError::TooFewSamples { need: 1, got: 0 });
    }
    for i in 1..t.len() {
        if t[i] <= t[i - 1] {
            return Err(MetricsError::UnsortedTimestamps(i));
        }
    }
    Ok(())
}

impl ScalarSeries {
    pub fn new(t: Vec<f64>, v: Vec<f64>) -> Result<Self, MetricsError> {
        if t.len() != v.len() {
            return Err(MetricsError::MismatchedLengths { t: t.len(), v: v.len() });
        }
        check_times(&t)?;
        Ok(ScalarSeries { t, v })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn values(&self) -> &[f64] {
        &self.v
    }

    pub fn span(&self) -> (f64, f64) {
        (self.t[0], self.t[self.len() - 1])
    }

    /// Linear interpolation inside the span (callers guarantee bounds).
    fn value_at(&self, t: f64) -> f64 {
        let i = self.t.partition_point(|&x| x <= t);
        if i == 0 {
            return self.v[0];
        }
        if i == self.len() {
            return self.v[self.len() - 1];
        }
        let (t0, t1) = (self.t[i - 1], self.t[i]);
        let lambda = (t - t0) / (t1 - t0);
        self.v[i - 1] + lambda * (self.v[i] - self.v[i - 1])
    }

    /// Keeps samples with t <= cutoff.
    pub fn truncated(&self, cutoff: f64) -> Self {
        let n = self.t.partition_point(|&x| x <= cutoff);
        ScalarSeries {
            t: self.t[..n].to_vec(),
            v: self.v[..n].to_vec(),
        }
    }
}

impl Vec3Series {
    pub fn new(t: Vec<f64>, v: Vec<Vector3<f64>>) -> Result<Self, MetricsError> {
        if t.len() != v.len() {
            return Err(MetricsError::MismatchedLengths { t: t.len(), v: v.len() });
        }
        check_times(&t)?;
        Ok(Vec3Series { t, v })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn values(&self) -> &[Vector3<f64>] {
        &self.v
    }

    pub fn span(&self) -> (f64, f64) {
        (self.t[0], self.t[self.len() - 1])
    }

    pub fn magnitude(&self) -> ScalarSeries {
        ScalarSeries {
            t: self.t.clone(),
            v: self.v.iter().map(|p| p.norm()).collect(),
        }
    }

    pub fn component(&self, i: usize) -> ScalarSeries {
        ScalarSeries {
            t: self.t.clone(),
            v: self.v.iter().map(|p| p[i]).collect(),
        }
    }

    pub fn truncated(&self, cutoff: f64) -> Self {
        let n = self.t.partition_point(|&x| x <= cutoff);
        Vec3Series {
            t: self.t[..n].to_vec(),
            v: self.v[..n].to_vec(),
        }
    }
}

/// Time-weighted RMS of the piecewise-linear interpolant over a union of
/// intervals: the integral of the squared signal over each interval has the
/// exact closed form h (va^2 + va vb + vb^2) / 3 per linear segment.
pub fn rms(signal: &ScalarSeries, intervals: &[(f64, f64)]) -> Result<f64, MetricsError> {
    let (t0, t1) = signal.span();
    let mut total = 0.0;
    let mut integral = 0.0;
    for &(a, b) in intervals {
        if b < a || a < t0 - 1e-12 || b > t1 + 1e-12 {
            return Err(MetricsError::IntervalOutOfSpan { a, b, t0, t1 });
        }
        total += b - a;
        if signal.len() == 1 {
            integral += (b - a) * signal.v[0] * signal.v[0];
            continue;
        }
        // Walk segments overlapping [a, b].
        let mut k = signal.t.partition_point(|&x| x <= a).saturating_sub(1);
        while k + 1 < signal.len() && signal.t[k] < b {
            let c0 = signal.t[k].max(a);
            let c1 = signal.t[k + 1].min(b);
            if c1 > c0 {
                let va = signal.value_at(c0);
                let vb = signal.value_at(c1);
                integral += (c1 - c0) * (va * va + va * vb + vb * vb) / 3.0;
            }
            k += 1;
        }
    }
    if total <= 0.0 {
        return Err(MetricsError::EmptyIntervalUnion);
    }
    Ok((integral / total).sqrt())
}

/// Derivative by three-point Lagrange stencils: central where possible,
/// one-sided at the ends, exact for quadratics even on nonuniform grids.
/// Two samples fall back to the single secant slope.
pub fn derivative(signal: &ScalarSeries) -> Result<ScalarSeries, MetricsError> {
    let n = signal.len();
    if n < 2 {
        return Err(MetricsError::TooFewSamples { need: 2, got: n });
    }
    let (t, v) = (&signal.t, &signal.v);
    if n == 2 {
        let slope = (v[1] - v[0]) / (t[1] - t[0]);
        return Ok(ScalarSeries {
            t: t.clone(),
            v: vec![slope; 2],
        });
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let s = if i == 0 { 0 } else if i == n - 1 { n - 3 } else { i - 1 };
        let (ta, tb, tc) = (t[s], t[s + 1], t[s + 2]);
        let (fa, fb, fc) = (v[s], v[s + 1], v[s + 2]);
        let ti = t[i];
        let d = fa * (2.0 * ti - tb - tc) / ((ta - tb) * (ta - tc))
            + fb * (2.0 * ti - ta - tc) / ((tb - ta) * (tb - tc))
            + fc * (2.0 * ti - ta - tb) / ((tc - ta) * (tc - tb));
        out.push(d);
    }
    Ok(ScalarSeries { t: t.clone(), v: out })
}

fn derivative3(signal: &Vec3Series) -> Result<Vec3Series, MetricsError> {
    let dx = derivative(&signal.component(0))?;
    let dy = derivative(&signal.component(1))?;
    let dz = derivative(&signal.component(2))?;
    Ok(Vec3Series {
        t: signal.t.clone(),
        v: dx
            .v
            .iter()
            .zip(&dy.v)
            .zip(&dz.v)
            .map(|((&x, &y), &z)| Vector3::new(x, y, z))
            .collect(),
    })
}

/// Fraction of episode time whose segment-wise speed is below the
/// threshold; the moving fraction is exactly its complement.
pub fn idle_ratio(positions: &Vec3Series, speed_threshold: f64) -> Result<f64, MetricsError> {
    let n = positions.len();
    if n < 2 {
        return Err(MetricsError::TooFewSamples { need: 2, got: n });
    }
    let mut idle = 0.0;
    let mut total = 0.0;
    for k in 0..n - 1 {
        let dt = positions.t[k + 1] - positions.t[k];
        let speed = (positions.v[k + 1] - positions.v[k]).norm() / dt;
        total += dt;
        if speed < speed_threshold {
            idle += dt;
        }
    }
    Ok(idle / total)
}

/// Maximal intervals where the signal exceeds the threshold, with crossing
/// times located by linear interpolation inside straddling segments.
pub fn contact_intervals(mag: &ScalarSeries, threshold: f64) -> Vec<(f64, f64)> {
    let n = mag.len();
    let mut spans = Vec::new();
    if n == 0 {
        return spans;
    }
    let mut open: Option<f64> = if mag.v[0] > threshold { Some(mag.t[0]) } else { None };
    for k in 0..n.saturating_sub(1) {
        let (v0, v1) = (mag.v[k], mag.v[k + 1]);
        let inside0 = v0 > threshold;
        let inside1 = v1 > threshold;
        if inside0 == inside1 {
            continue;
        }
        let tc = mag.t[k] + (threshold - v0) / (v1 - v0) * (mag.t[k + 1] - mag.t[k]);
        if inside1 {
            open = Some(tc);
        } else if let Some(start) = open.take() {
            spans.push((start, tc));
        }
    }
    if let Some(start) = open {
        spans.push((start, mag.t[n - 1]));
    }
    spans
}

/// Contact-phase force statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactMetrics {
    pub force_rms: f64,
    pub force_smoothness: f64,
    /// False when no sample ever exceeded the contact threshold; the other
    /// fields are zero in that case.
    pub had_contact: bool,
}

/// RMS force magnitude and RMS of its time derivative over the maximal
/// spans where the magnitude exceeds the threshold.
pub fn contact_metrics(
    force: &Vec3Series,
    threshold: f64,
) -> Result<ContactMetrics, MetricsError> {
    if force.len() < 2 {
        return Err(MetricsError::TooFewSamples { need: 2, got: force.len() });
    }
    let mag = force.magnitude();
    let spans = contact_intervals(&mag, threshold);
    if spans.is_empty() {
        return Ok(ContactMetrics {
            force_rms: 0.0,
            force_smoothness: 0.0,
            had_contact: false,
        });
    }
    let force_rms = rms(&mag, &spans)?;
    let force_smoothness = rms(&derivative(&mag)?, &spans)?;
    Ok(ContactMetrics {
        force_rms,
        force_smoothness,
        had_contact: true,
    })
}

/// Time-weighted RMS of the Cartesian jerk magnitude (third derivative of
/// position) over the whole signal span.
pub fn motion_smoothness(positions: &Vec3Series) -> Result<f64, MetricsError> {
    if positions.len() < 4 {
        return Err(MetricsError::TooFewSamples { need: 4, got: positions.len() });
    }
    let jerk = derivative3(&derivative3(&derivative3(positions)?)?)?;
    let mag = jerk.magnitude();
    rms(&mag, &[mag.span()])
}

/// Normalized distance to the goal per sample: |p(t) - goal| / |start - goal|.
pub fn task_progress(
    positions: &Vec3Series,
    start: &Vector3<f64>,
    goal: &Vector3<f64>,
) -> Result<Vec<(f64, f64)>, MetricsError> {
    let denom = (start - goal).norm();
    if denom == 0.0 {
        return Err(MetricsError::DegenerateGoal);
    }
    Ok(positions
        .t
        .iter()
        .zip(&positions.v)
        .map(|(&t, p)| (t, (p - goal).norm() / denom))
        .collect())
}

/// First time the progression drops below `fraction` and stays below it for
/// `sustain` seconds of logged samples. None if never sustained.
pub fn completion_time(
    progression: &[(f64, f64)],
    fraction: f64,
    sustain: f64,
) -> Option<f64> {
    let n = progression.len();
    let last_t = progression.last()?.0;
    let mut i = 0;
    while i < n {
        if progression[i].1 < fraction {
            let t0 = progression[i].0;
            if t0 + sustain > last_t {
                return None;
            }
            let mut j = i;
            let mut ok = true;
            while j < n && progression[j].0 <= t0 + sustain {
                if progression[j].1 >= fraction {
                    ok = false;
                    break;
                }
                j += 1;
            }
            if ok {
                return Some(t0);
            }
            i = j;
        } else {
            i += 1;
        }
    }
    None
}

/// Thresholds shared by the evaluation suite.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// Speed below which the TCP counts as idle, m/s.
    pub idle_speed_threshold: f64,
    /// Force magnitude defining the contact phase, N.
    pub contact_force_threshold: f64,
    /// Normalized distance counting as at-goal.
    pub completion_fraction: f64,
    /// Time the at-goal condition must hold, s.
    pub completion_sustain_s: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            idle_speed_threshold: 1e-3,
            contact_force_threshold: 5.0,
            completion_fraction: 0.02,
            completion_sustain_s: 0.5,
        }
    }
}

/// Full per-episode evaluation: duration to completion, idle ratio,
/// contact-phase force statistics, motion smoothness, and the progression
/// trace.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub duration_s: f64,
    pub completed: bool,
    pub idle_ratio: f64,
    pub contact_force_rms: f64,
    pub force_smoothness: f64,
    pub had_contact: bool,
    pub motion_smoothness: f64,
    pub progression: Vec<(f64, f64)>,
}

impl MetricsReport {
    /// Evaluates one episode from its feedback positions and external
    /// forces. When the progression completes, all statistics are computed
    /// over [start, completion]; otherwise over the whole log (flagged).
    pub fn from_signals(
        positions: &Vec3Series,
        forces: &Vec3Series,
        start: &Vector3<f64>,
        goal: &Vector3<f64>,
        cfg: &MetricsConfig,
    ) -> Result<Self, MetricsError> {
        let progression = task_progress(positions, start, goal)?;
        let done = completion_time(&progression, cfg.completion_fraction, cfg.completion_sustain_s);
        let t0 = positions.span().0;
        let (pos, force, duration, completed) = match done {
            Some(tc) => (
                positions.truncated(tc),
                forces.truncated(tc),
                tc - t0,
                true,
            ),
            None => (
                positions.clone(),
                forces.clone(),
                positions.span().1 - t0,
                false,
            ),
        };
        let idle = idle_ratio(&pos, cfg.idle_speed_threshold)?;
        let contact = contact_metrics(&force, cfg.contact_force_threshold)?;
        let smooth = motion_smoothness(&pos)?;
        Ok(MetricsReport {
            duration_s: duration,
            completed,
            idle_ratio: idle,
            contact_force_rms: contact.force_rms,
            force_smoothness: contact.force_smoothness,
            had_contact: contact.had_contact,
            motion_smoothness: smooth,
            progression,
        })
    }
}
