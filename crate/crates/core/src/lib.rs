//! Discrete-event model of collective communication on a 3D torus of
//! accelerator nodes, with baseline, offloaded and ideal endpoint datapaths.

pub mod analytics;
pub mod collectives;
pub mod config;
pub mod endpoint;
pub mod engine;
pub mod error;
pub mod oracle;
pub mod topology;
pub mod units;
pub mod workload;

pub use error::{ConfigError, Deadlock, Error, Result, ScheduleError, TraceError};
