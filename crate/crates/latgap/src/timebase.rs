//! Virtual time, clocks, and delayed message channels.
//!
//! All simulation experiments run on a virtual clock: time is a continuous
//! double-precision second count that only ever moves forward. Latency is
//! modelled by [`DelayedChannel`], which makes a message visible exactly
//! `delay` seconds after it was sent.

use std::collections::VecDeque;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A point in virtual time, in seconds. Non-negative by construction in
/// simulation runs; differences produce a signed [`Duration`].
#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(f64);

/// A signed span of virtual time, in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Duration(f64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0.0);

    pub fn from_secs(secs: f64) -> Self {
        debug_assert!(secs.is_finite());
        Timestamp(secs)
    }

    pub fn secs(self) -> f64 {
        self.0
    }
}

impl Duration {
    pub const ZERO: Duration = Duration(0.0);

    pub fn from_secs(secs: f64) -> Self {
        debug_assert!(secs.is_finite());
        Duration(secs)
    }

    pub fn from_millis(ms: f64) -> Self {
        Duration(ms * 1e-3)
    }

    pub fn secs(self) -> f64 {
        self.0
    }

    pub fn abs(self) -> Duration {
        Duration(self.0.abs())
    }
}

impl Eq for Timestamp {}

impl Ord for Timestamp {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl Eq for Duration {}

impl Ord for Duration {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl Add<Duration> for Timestamp {
    type Output = Timestamp;
    fn add(self, rhs: Duration) -> Timestamp {
        Timestamp(self.0 + rhs.0)
    }
}

impl Sub<Duration> for Timestamp {
    type Output = Timestamp;
    fn sub(self, rhs: Duration) -> Timestamp {
        Timestamp(self.0 - rhs.0)
    }
}

impl Sub for Timestamp {
    type Output = Duration;
    fn sub(self, rhs: Timestamp) -> Duration {
        Duration(self.0 - rhs.0)
    }
}

impl AddAssign<Duration> for Timestamp {
    fn add_assign(&mut self, rhs: Duration) {
        self.0 += rhs.0;
    }
}

impl Add for Duration {
    type Output = Duration;
    fn add(self, rhs: Duration) -> Duration {
        Duration(self.0 + rhs.0)
    }
}

impl Sub for Duration {
    type Output = Duration;
    fn sub(self, rhs: Duration) -> Duration {
        Duration(self.0 - rhs.0)
    }
}

impl Neg for Duration {
    type Output = Duration;
    fn neg(self) -> Duration {
        Duration(-self.0)
    }
}

impl Mul<f64> for Duration {
    type Output = Duration;
    fn mul(self, rhs: f64) -> Duration {
        Duration(self.0 * rhs)
    }
}

impl Div<Duration> for Duration {
    type Output = f64;
    fn div(self, rhs: Duration) -> f64 {
        self.0 / rhs.0
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ClockError {
    #[error("clock cannot move backward: now = {now} s, requested {requested} s")]
    Backward { now: f64, requested: f64 },
}

/// Monotonic virtual clock driving a simulation run.
#[derive(Clone, Debug)]
pub struct VirtualClock {
    now: Timestamp,
}

impl VirtualClock {
    pub fn new(start: Timestamp) -> Self {
        VirtualClock { now: start }
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    /// Advances to an absolute time. Rejects backward jumps; advancing to
    /// the current time is a no-op.
    pub fn advance_to(&mut self, t: Timestamp) -> Result<(), ClockError> {
        if t < self.now {
            return Err(ClockError::Backward {
                now: self.now.secs(),
                requested: t.secs(),
            });
        }
        self.now = t;
        Ok(())
    }
}

/// Wall-clock adapter for the optional real-time mode: maps wall time since
/// construction onto the same [`Timestamp`] axis the virtual clock uses.
#[derive(Debug)]
pub struct WallClock {
    origin: std::time::Instant,
}

impl WallClock {
    pub fn start() -> Self {
        WallClock {
            origin: std::time::Instant::now(),
        }
    }

    pub fn now(&self) -> Timestamp {
        Timestamp::from_secs(self.origin.elapsed().as_secs_f64())
    }
}

#[derive(Clone, Debug)]
struct InFlight<M> {
    available_at: Timestamp,
    msg: M,
}

/// A FIFO channel whose messages become visible `delay` seconds after they
/// are sent. Messages with equal availability times are delivered in send
/// order, so a fixed schedule of sends and polls always yields the same
/// delivery sequence.
#[derive(Clone, Debug)]
pub struct DelayedChannel<M> {
    delay: Duration,
    queue: VecDeque<InFlight<M>>,
}

impl<M> DelayedChannel<M> {
    pub fn new(delay: Duration) -> Self {
        assert!(delay >= Duration::ZERO, "channel delay must be non-negative");
        DelayedChannel {
            delay,
            queue: VecDeque::new(),
        }
    }

    pub fn delay(&self) -> Duration {
        self.delay
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Enqueues a message sent at `now`; it becomes visible at `now + delay`.
    pub fn send(&mut self, msg: M, now: Timestamp) {
        let available_at = now + self.delay;
        // Insert after every queued message that is available no later than
        // this one, keeping the queue sorted and ties in send order.
        let pos = self
            .queue
            .partition_point(|e| e.available_at <= available_at);
        self.queue.insert(pos, InFlight { available_at, msg });
    }

    /// Removes and returns every message visible at `now`, in availability
    /// order (send order among equal timestamps).
    pub fn poll(&mut self, now: Timestamp) -> Vec<M> {
        self.poll_entries(now).into_iter().map(|(_, m)| m).collect()
    }

    /// Like [`poll`](Self::poll), but also reports each message's delivery
    /// time (the instant it became visible), which a latency-calibration
    /// receiver records as its receive timestamp.
    pub fn poll_entries(&mut self, now: Timestamp) -> Vec<(Timestamp, M)> {
        let mut out = Vec::new();
        while let Some(front) = self.queue.front() {
            if front.available_at <= now {
                let e = self.queue.pop_front().expect("non-empty");
                out.push((e.available_at, e.msg));
            } else {
                break;
            }
        }
        out
    }

    /// Availability time of the next undelivered message, if any.
    pub fn next_available(&self) -> Option<Timestamp> {
        self.queue.front().map(|e| e.available_at)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: f64) -> Timestamp {
        Timestamp::from_secs(s)
    }

    #[test]
    fn message_invisible_before_delay_elapses() {
        let mut ch = DelayedChannel::new(Duration::from_millis(50.0));
        ch.send(42u32, ts(0.0));
        assert!(ch.poll(ts(0.049)).is_empty());
        assert_eq!(ch.poll(ts(0.050)), vec![42]);
    }

    #[test]
    fn zero_delay_is_visible_immediately() {
        let mut ch = DelayedChannel::new(Duration::ZERO);
        ch.send(7u32, ts(1.0));
        assert_eq!(ch.poll(ts(1.0)), vec![7]);
    }

    #[test]
    fn equal_timestamps_keep_send_order() {
        let mut ch = DelayedChannel::new(Duration::from_millis(10.0));
        ch.send('a', ts(0.0));
        ch.send('b', ts(0.0));
        ch.send('c', ts(0.0));
        assert_eq!(ch.poll(ts(0.010)), vec!['a', 'b', 'c']);
    }

    #[test]
    fn poll_removes_messages() {
        let mut ch = DelayedChannel::new(Duration::ZERO);
        ch.send(1u8, ts(0.0));
        assert_eq!(ch.poll(ts(0.0)), vec![1]);
        assert!(ch.poll(ts(10.0)).is_empty());
        assert!(ch.is_empty());
    }

    #[test]
    fn delivery_ordered_by_availability_not_send_order() {
        // A later send with a shorter remaining wait still delivers after the
        // earlier send because availability times are what order delivery.
        let mut ch = DelayedChannel::new(Duration::from_millis(100.0));
        ch.send(1u8, ts(0.0)); // available 0.1
        ch.send(2u8, ts(0.02)); // available 0.12
        let got = ch.poll_entries(ts(1.0));
        assert_eq!(got[0], (ts(0.0) + ch.delay(), 1));
        assert_eq!(got[1], (ts(0.02) + ch.delay(), 2));
    }

    #[test]
    fn clock_rejects_backward_jump() {
        let mut clock = VirtualClock::new(ts(0.0));
        clock.advance_to(ts(5.0)).unwrap();
        clock.advance_to(ts(5.0)).unwrap(); // advancing to the same time is fine
        let err = clock.advance_to(ts(4.0)).unwrap_err();
        assert_eq!(
            err,
            ClockError::Backward {
                now: 5.0,
                requested: 4.0
            }
        );
        assert_eq!(clock.now(), ts(5.0));
    }

    #[test]
    fn causality_under_random_schedule() {
        use rand::{rngs::StdRng, Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(11);
        let delay = Duration::from_millis(37.0);
        let mut ch = DelayedChannel::new(delay);
        let mut sent: Vec<(usize, Timestamp)> = Vec::new();
        let mut now = ts(0.0);
        for i in 0..500 {
            now += Duration::from_secs(rng.gen_range(0.0..0.01));
            ch.send(i, now);
            sent.push((i, now));
            if rng.gen_bool(0.3) {
                for (recv_at, idx) in ch.poll_entries(now) {
                    let (_, send_t) = sent[idx];
                    // Never delivered earlier than send + delay.
                    assert!(recv_at == send_t + delay);
                    assert!(recv_at <= now);
                }
            }
        }
    }

    #[test]
    fn identical_schedules_produce_identical_deliveries() {
        let run = || {
            let mut ch = DelayedChannel::new(Duration::from_millis(20.0));
            let mut log = Vec::new();
            for k in 0..100u32 {
                let t = ts(k as f64 * 0.005);
                ch.send(k, t);
                for (at, m) in ch.poll_entries(t) {
                    log.push((at.secs().to_bits(), m));
                }
            }
            log
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn wall_clock_is_monotonic() {
        let wc = WallClock::start();
        let a = wc.now();
        let b = wc.now();
        assert!(b >= a);
    }
}
