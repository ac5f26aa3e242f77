//! Post-processing: the closed-form memory bandwidth model, bandwidth and SM
//! sweeps, windowed link utilization and machine-readable reports.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::collectives::{plan_collective, ChunkPlan, CollectiveKind};
use crate::endpoint::{ace_traffic, baseline_traffic, Datapath, TrafficReport};
use crate::engine::{run_single, CollectiveRecord, EngineConfig, EngineReport};
use crate::error::{ConfigError, Error};
use crate::topology::{Dims, Dir, LinkParams, Topology};
use crate::units::{Cycles, MIB};
use crate::workload::RunMetrics;

/// Communication memory bandwidths swept by default, GB/s.
pub const DEFAULT_BW_GRID: [f64; 11] = [32.0, 64.0, 96.0, 128.0, 192.0, 256.0, 384.0, 450.0, 512.0, 768.0, 900.0];

/// Memory reads per network byte of the NPU-driven datapath in steady state.
pub const BASELINE_READS_PER_SENT: f64 = 1.5;

/// Bumped whenever a report field changes meaning or disappears.
pub const SCHEMA_VERSION: u32 = 1;

/// JSON schema of [`Report`], shipped with the crate.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

/// Memory read bandwidth needed to keep `target_gbps` of network traffic
/// going per node.
pub fn required_mem_bw_analytic(
    kind: CollectiveKind,
    dims: Dims,
    target_gbps: f64,
    datapath: Datapath,
) -> Result<f64, ConfigError> {
    if !(target_gbps.is_finite() && target_gbps >= 0.0) {
        return Err(ConfigError::invalid("target_network_gbps", "must be non-negative"));
    }
    if target_gbps == 0.0 {
        return Ok(0.0);
    }
    match datapath {
        Datapath::Ideal => Ok(0.0),
        Datapath::Baseline if kind.reduces() => Ok(BASELINE_READS_PER_SENT * target_gbps),
        Datapath::Baseline | Datapath::Ace => {
            let topo = Topology::build_torus(dims, &LinkParams::default())?;
            // a payload every phase splits evenly, so no padding skews the ratio
            let payload = dims.node_count() as u64 * 4096;
            let s = plan_collective(kind, &topo, &ChunkPlan::new(payload).with_message_bytes(payload), Dir::Up);
            let t = match datapath {
                Datapath::Ace => ace_traffic(&s),
                _ => baseline_traffic(&s),
            };
            if t.network_bytes_sent == 0 {
                return Ok(0.0);
            }
            Ok(t.mem_bytes_read as f64 / t.network_bytes_sent as f64 * target_gbps)
        }
    }
}

/// A single collective on an otherwise idle system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Microbenchmark {
    pub kind: CollectiveKind,
    pub payload_bytes: u64,
}

impl Default for Microbenchmark {
    fn default() -> Self {
        Microbenchmark {
            kind: CollectiveKind::AllReduce,
            payload_bytes: 64 * MIB,
        }
    }
}

/// Network bandwidth the microbenchmark achieves per node.
pub fn achieved_network_gbps(cfg: &EngineConfig, topo: &Topology, mb: Microbenchmark) -> Result<f64, Error> {
    let r = run_single(cfg, topo, mb.kind, mb.payload_bytes)?;
    Ok(r.effective_gbps(topo.node_count()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BwSweepPoint {
    pub comm_mem_bw: f64,
    pub achieved_network_bw: f64,
    pub fraction_of_ideal: f64,
}

/// Runs `mb` once per grid value of communication memory bandwidth. Points
/// are independent and run in parallel; the result follows grid order.
pub fn bw_sweep(
    template: &EngineConfig,
    topo: &Topology,
    grid: &[f64],
    mb: Microbenchmark,
    ideal_plateau: f64,
) -> Result<Vec<BwSweepPoint>, Error> {
    grid.par_iter()
        .map(|&bw| {
            let mut cfg = template.clone();
            cfg.budget.mem_bw_comm_gbps = bw;
            let achieved = achieved_network_gbps(&cfg, topo, mb)?;
            Ok(BwSweepPoint {
                comm_mem_bw: bw,
                achieved_network_bw: achieved,
                fraction_of_ideal: if ideal_plateau > 0.0 { achieved / ideal_plateau } else { 0.0 },
            })
        })
        .collect()
}

/// Highest achieved bandwidth over a sweep.
pub fn plateau(points: &[BwSweepPoint]) -> f64 {
    points.iter().map(|p| p.achieved_network_bw).fold(0.0, f64::max)
}

/// Smallest grid value whose point reaches `fraction` of the ideal plateau.
pub fn first_reaching(points: &[BwSweepPoint], fraction: f64) -> Option<f64> {
    points.iter().find(|p| p.fraction_of_ideal >= fraction).map(|p| p.comm_mem_bw)
}

/// Like [`first_reaching`], but interpolates linearly between the grid
/// points that straddle the threshold.
pub fn interpolated_reaching(points: &[BwSweepPoint], fraction: f64) -> Option<f64> {
    let i = points.iter().position(|p| p.fraction_of_ideal >= fraction)?;
    if i == 0 {
        return Some(points[0].comm_mem_bw);
    }
    let (a, b) = (&points[i - 1], &points[i]);
    let t = (fraction - a.fraction_of_ideal) / (b.fraction_of_ideal - a.fraction_of_ideal);
    Some(a.comm_mem_bw + t * (b.comm_mem_bw - a.comm_mem_bw))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmSweepPoint {
    pub sm_comm: u32,
    /// Memory bandwidth the SMs can drive, capped by the reserved share.
    pub comm_bw: f64,
    pub achieved_network_bw: f64,
}

/// Network bandwidth the baseline reaches with each number of
/// communication SMs. Zero SMs move nothing and are not simulated.
pub fn sm_sweep(
    template: &EngineConfig,
    topo: &Topology,
    grid: &[u32],
    mb: Microbenchmark,
) -> Result<Vec<SmSweepPoint>, Error> {
    grid.par_iter()
        .map(|&sms| {
            let mut cfg = template.clone();
            cfg.datapath = Datapath::Baseline;
            cfg.budget.sm_comm = sms;
            let comm_bw = cfg.budget.baseline_comm_gbps();
            let achieved = if sms == 0 {
                0.0
            } else {
                achieved_network_gbps(&cfg, topo, mb)?
            };
            Ok(SmSweepPoint {
                sm_comm: sms,
                comm_bw,
                achieved_network_bw: achieved,
            })
        })
        .collect()
}

/// Average fraction of links busy per window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtilizationTimeline {
    pub window_cycles: Cycles,
    pub fractions: Vec<f64>,
}

impl UtilizationTimeline {
    pub fn from_report(r: &EngineReport) -> Self {
        UtilizationTimeline {
            window_cycles: r.window_cycles,
            fractions: r.utilization(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("window_index,utilization\n");
        for (i, u) in self.fractions.iter().enumerate() {
            out.push_str(&format!("{i},{u:.6}\n"));
        }
        out
    }
}

/// Hex SHA-256 of a canonical config text.
pub fn config_hash(canonical: &str) -> String {
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Summary of one run. Field order is the serialization order.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub system: String,
    pub dims: String,
    pub workload: String,
    pub iteration_cycles: Cycles,
    pub total_compute_cycles: Cycles,
    pub exposed_comm_cycles: Cycles,
    pub comm_busy_cycles: Cycles,
    pub iteration_ends: Vec<Cycles>,
    pub effective_network_gbps: f64,
    pub mean_utilization: f64,
    pub window_cycles: Cycles,
    pub traffic: TrafficReport,
    pub collectives: Vec<CollectiveRecord>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl Report {
    pub fn from_training(m: &RunMetrics, config_hash: &str, seed: u64) -> Self {
        Report {
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash.to_string(),
            seed,
            system: m.system.to_string(),
            dims: m.dims.clone(),
            workload: m.model.clone(),
            iteration_cycles: m.iteration_cycles,
            total_compute_cycles: m.total_compute_cycles,
            exposed_comm_cycles: m.exposed_comm_cycles,
            comm_busy_cycles: m.comm_busy_cycles,
            iteration_ends: m.iteration_ends.clone(),
            effective_network_gbps: m.effective_network_gbps,
            mean_utilization: mean(&m.utilization),
            window_cycles: m.window_cycles,
            traffic: m.traffic,
            collectives: m.collectives.clone(),
        }
    }

    /// A lone collective: all of its time is exposed communication.
    pub fn from_microbenchmark(
        r: &EngineReport,
        system: &str,
        topo: &Topology,
        workload: &str,
        config_hash: &str,
        seed: u64,
    ) -> Self {
        Report {
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash.to_string(),
            seed,
            system: system.to_string(),
            dims: topo.dims().to_string(),
            workload: workload.to_string(),
            iteration_cycles: r.finish,
            total_compute_cycles: 0,
            exposed_comm_cycles: r.finish,
            comm_busy_cycles: r.finish,
            iteration_ends: vec![r.finish],
            effective_network_gbps: r.effective_gbps(topo.node_count()),
            mean_utilization: mean(&r.utilization()),
            window_cycles: r.window_cycles,
            traffic: r.traffic,
            collectives: r.collectives.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Writes the JSON summary, or for CSV the utilization timeline.
pub fn emit_report(
    report: &Report,
    timeline: &UtilizationTimeline,
    format: ReportFormat,
    path: &Path,
) -> Result<(), Error> {
    let text = match format {
        ReportFormat::Json => report.to_json(),
        ReportFormat::Csv => timeline.to_csv(),
    };
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
