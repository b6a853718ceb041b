//! Deterministic simulation testbed for latency-aware execution of
//! finite-horizon visuomotor policies.
//!
//! The crate models a sensing -> inference -> execution pipeline on a
//! simulated robot cell: delayed sensor streams feed a k-NN policy that
//! predicts timestamped action chunks, and an executor schedules those
//! chunks against the robot's measured latencies. Three execution
//! strategies (blocking, naive-async, latency-aware) can be compared on a
//! contact-rich slot-insertion task under configurable observation,
//! inference, and execution latencies.

pub mod executor;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod policy;
pub mod sensing;
pub mod simworld;
pub mod timebase;
pub mod vision;
