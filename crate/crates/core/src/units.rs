//! Clock and bandwidth units.
//!
//! All simulated time is integer cycles of a single 1245 MHz clock.
//! Bandwidths are carried as integer bytes per mega-cycle so that
//! fractional rates such as 151.0 B/cycle stay exact across runs.

pub type Cycles = u64;

pub const CLOCK_MHZ: f64 = 1245.0;

/// Sub-cycle resolution used by channels.
pub const TICKS_PER_CYCLE: u64 = 1_000_000;

pub const KIB: u64 = 1024;
pub const MIB: u64 = 1024 * 1024;

/// GB/s (1e9 bytes per second) to bytes per mega-cycle.
pub fn gbps_to_bytes_per_mcycle(gbps: f64) -> u64 {
    (gbps * 1e15 / (CLOCK_MHZ * 1e6)).round() as u64
}

pub fn bytes_per_mcycle_to_gbps(rate: u64) -> f64 {
    rate as f64 * CLOCK_MHZ * 1e6 / 1e15
}

/// Average bytes per cycle to GB/s.
pub fn bytes_per_cycle_to_gbps(bpc: f64) -> f64 {
    bpc * CLOCK_MHZ / 1e3
}

pub fn gbps_to_bytes_per_cycle(gbps: f64) -> f64 {
    gbps * 1e3 / CLOCK_MHZ
}
