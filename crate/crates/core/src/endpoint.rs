//! Per-node resources and the byte accounting of the two datapaths.

use std::ops::{AddAssign, Range};

use serde::{Deserialize, Serialize};

use crate::collectives::{Action, CollectiveSchedule, SendOrigin};
use crate::error::ConfigError;
use crate::units::{Cycles, MIB};

/// Which machinery moves collective data at the endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Datapath {
    /// NPU cores drive communication; every step round-trips through memory.
    Baseline,
    /// The offload engine: one DMA in, one DMA out, everything else in SRAM.
    Ace,
    /// Received data is ready one cycle after arrival at no cost.
    Ideal,
}

/// Memory bandwidth, cores and buses of one node. Bandwidths are GB/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResourceBudget {
    pub mem_bw_total_gbps: f64,
    pub mem_bw_comm_gbps: f64,
    pub sm_total: u32,
    pub sm_comm: u32,
    pub bus_npu_afi_gbps: f64,
    pub bus_npu_mem_gbps: f64,
    /// Bytes per cycle a single SM can move.
    pub per_sm_bytes_per_cycle: f64,
}

impl Default for ResourceBudget {
    fn default() -> Self {
        ResourceBudget {
            mem_bw_total_gbps: 900.0,
            mem_bw_comm_gbps: 0.0,
            sm_total: 80,
            sm_comm: 0,
            bus_npu_afi_gbps: 500.0,
            bus_npu_mem_gbps: 900.0,
            per_sm_bytes_per_cycle: 64.0,
        }
    }
}

impl ResourceBudget {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let pos = |k: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(ConfigError::invalid(k, format!("must be positive, got {v}")))
            }
        };
        pos("endpoint.mem_bw_gbps", self.mem_bw_total_gbps)?;
        pos("endpoint.bus_npu_afi_gbps", self.bus_npu_afi_gbps)?;
        pos("endpoint.bus_npu_mem_gbps", self.bus_npu_mem_gbps)?;
        pos("endpoint.per_sm_bytes_per_cycle", self.per_sm_bytes_per_cycle)?;
        if !(self.mem_bw_comm_gbps >= 0.0 && self.mem_bw_comm_gbps <= self.mem_bw_total_gbps) {
            return Err(ConfigError::invalid(
                "endpoint.mem_bw_comm_gbps",
                format!("must be in [0, {}]", self.mem_bw_total_gbps),
            ));
        }
        if self.sm_total == 0 || self.sm_comm > self.sm_total {
            return Err(ConfigError::invalid(
                "endpoint.sm_comm",
                format!("must be at most sm_total ({})", self.sm_total),
            ));
        }
        Ok(())
    }

    pub fn per_sm_gbps(&self) -> f64 {
        crate::units::bytes_per_cycle_to_gbps(self.per_sm_bytes_per_cycle)
    }

    /// Memory bandwidth the baseline can use for communication: limited by
    /// both the reserved share and the SMs that drive it.
    pub fn baseline_comm_gbps(&self) -> f64 {
        self.mem_bw_comm_gbps.min(self.sm_comm as f64 * self.per_sm_gbps())
    }
}

/// Offload engine parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AceConfig {
    pub sram_bytes: u64,
    pub fsm_count: usize,
    pub alu_count: usize,
    /// Bytes one ALU reduces per cycle (16 x FP32 or 32 x FP16).
    pub alu_width_bytes: u64,
    /// Width of each partition's read port and write port, bytes per cycle.
    pub sram_port_bytes: u64,
    /// Chunks one FSM may have in progress at once.
    pub chunks_per_fsm: usize,
    /// FSMs programmed for each phase; `None` splits them evenly.
    pub fsm_per_phase: Option<Vec<usize>>,
    pub partition_policy: PartitionPolicy,
}

/// How SRAM is split between phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionPolicy {
    /// Proportional to link bandwidth times the chunk size entering the phase.
    BandwidthChunk,
    /// Proportional to the bytes the phase's FSMs can hold in flight.
    #[default]
    InFlight,
}

impl Default for AceConfig {
    fn default() -> Self {
        AceConfig {
            sram_bytes: 4 * MIB,
            fsm_count: 16,
            alu_count: 4,
            alu_width_bytes: 64,
            sram_port_bytes: 256,
            chunks_per_fsm: 3,
            fsm_per_phase: None,
            partition_policy: PartitionPolicy::default(),
        }
    }
}

impl AceConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.sram_bytes == 0 {
            return Err(ConfigError::invalid("ace.sram_mib", "must be positive"));
        }
        if self.fsm_count == 0 {
            return Err(ConfigError::invalid("ace.fsm_count", "must be positive"));
        }
        if self.alu_count == 0 || self.alu_width_bytes == 0 {
            return Err(ConfigError::invalid("ace.alu_count", "must be positive"));
        }
        if self.sram_port_bytes == 0 {
            return Err(ConfigError::invalid("ace.sram_port_bytes", "must be positive"));
        }
        if self.chunks_per_fsm == 0 {
            return Err(ConfigError::invalid("ace.chunks_per_fsm", "must be positive"));
        }
        if let Some(v) = &self.fsm_per_phase {
            if v.iter().any(|&n| n == 0) || v.iter().sum::<usize>() > self.fsm_count {
                return Err(ConfigError::invalid(
                    "ace.fsm_per_phase",
                    format!("each phase needs at least one FSM and the total may not exceed {}", self.fsm_count),
                ));
            }
        }
        Ok(())
    }

    /// Reduction throughput in bytes per cycle.
    pub fn alu_bytes_per_cycle(&self) -> u64 {
        self.alu_count as u64 * self.alu_width_bytes
    }

    /// FSMs per phase for a `phases`-phase collective.
    pub fn fsm_allocation(&self, phases: usize) -> Result<FsmAllocation, ConfigError> {
        let per_phase = match &self.fsm_per_phase {
            Some(v) if v.len() == phases => v.clone(),
            Some(v) => {
                return Err(ConfigError::invalid(
                    "ace.fsm_per_phase",
                    format!("has {} entries for a {phases}-phase collective", v.len()),
                ))
            }
            None => {
                if self.fsm_count < phases {
                    return Err(ConfigError::invalid(
                        "ace.fsm_count",
                        format!("{} FSMs cannot cover {phases} phases", self.fsm_count),
                    ));
                }
                (0..phases)
                    .map(|p| self.fsm_count / phases + usize::from(p < self.fsm_count % phases))
                    .collect()
            }
        };
        Ok(FsmAllocation { per_phase })
    }
}

/// Which FSMs serve each phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FsmAllocation {
    pub per_phase: Vec<usize>,
}

impl FsmAllocation {
    /// FSM (index within the phase) that serves the chunk with this
    /// per-phase sequence number. Round-robin.
    pub fn assign(&self, seq: u64, phase: usize) -> usize {
        (seq % self.per_phase[phase] as u64) as usize
    }
}

/// Sizing inputs for one phase's SRAM partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseDemand {
    pub bandwidth_gbps: f64,
    pub chunk_bytes: u64,
    pub message_bytes: u64,
}

/// Splits the SRAM into one partition per phase plus a terminal partition.
/// Partition sizes follow bandwidth x initial chunk size; the terminal
/// partition matches the last phase. Sizes are rounded down to whole
/// packets and the remainder goes to the first partition.
pub fn partition_sram(
    sram_bytes: u64,
    phases: &[PhaseDemand],
    packet_bytes: u64,
) -> Result<Vec<Range<u64>>, ConfigError> {
    if phases.is_empty() {
        return Err(ConfigError::invalid("ace.partitions", "need at least one phase"));
    }
    let mut w: Vec<f64> = phases.iter().map(|p| p.bandwidth_gbps * p.chunk_bytes as f64).collect();
    w.push(*w.last().unwrap());
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(ConfigError::invalid("ace.partitions", "phase weights must be positive"));
    }
    let mut sizes: Vec<u64> = w
        .iter()
        .map(|x| ((sram_bytes as f64 * x / total) as u64) / packet_bytes * packet_bytes)
        .collect();
    let used: u64 = sizes.iter().sum();
    sizes[0] += sram_bytes - used;
    for (p, (size, demand)) in sizes.iter().zip(phases.iter().chain(phases.last())).enumerate() {
        if *size < demand.message_bytes {
            return Err(ConfigError::invalid(
                "ace.sram_mib",
                format!("partition {p} is {size} bytes, smaller than one {} byte message", demand.message_bytes),
            ));
        }
    }
    let mut start = 0;
    Ok(sizes
        .into_iter()
        .map(|s| {
            let r = start..start + s;
            start += s;
            r
        })
        .collect())
}

/// Splits `sram_bytes` in proportion to `weights`, rounding each share down
/// to whole packets and giving the remainder to the first partition.
pub fn split_sram(sram_bytes: u64, weights: &[u64], packet_bytes: u64) -> Vec<Range<u64>> {
    let total: u128 = weights.iter().map(|&w| w as u128).sum::<u128>().max(1);
    let mut sizes: Vec<u64> = weights
        .iter()
        .map(|&w| (sram_bytes as u128 * w as u128 / total) as u64 / packet_bytes * packet_bytes)
        .collect();
    let used: u64 = sizes.iter().sum();
    if let Some(first) = sizes.first_mut() {
        *first += sram_bytes - used;
    }
    let mut start = 0;
    sizes
        .into_iter()
        .map(|s| {
            let r = start..start + s;
            start += s;
            r
        })
        .collect()
}

/// Byte counters for one schedule or one run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TrafficReport {
    pub mem_bytes_read: u64,
    pub mem_bytes_written: u64,
    pub bus_npu_afi_bytes: u64,
    pub bus_npu_mem_bytes: u64,
    pub network_bytes_sent: u64,
    pub sram_bytes_peak: u64,
}

impl AddAssign for TrafficReport {
    fn add_assign(&mut self, o: Self) {
        self.mem_bytes_read += o.mem_bytes_read;
        self.mem_bytes_written += o.mem_bytes_written;
        self.bus_npu_afi_bytes += o.bus_npu_afi_bytes;
        self.bus_npu_mem_bytes += o.bus_npu_mem_bytes;
        self.network_bytes_sent += o.network_bytes_sent;
        self.sram_bytes_peak = self.sram_bytes_peak.max(o.sram_bytes_peak);
    }
}

/// Memory traffic of the NPU-driven datapath, summed over all nodes.
///
/// Sends read their data unless it is the result of the reduction that
/// just completed; receives land in memory; reductions read both operands
/// and write the result back only when it has to be kept.
pub fn baseline_traffic(schedule: &CollectiveSchedule) -> TrafficReport {
    let mut r = TrafficReport::default();
    for s in &schedule.steps {
        let msg_bytes = |m: u32| schedule.messages[m as usize].bytes;
        match s.action {
            Action::SendMsg { msg, origin, .. } => {
                let m = msg_bytes(msg);
                if origin != SendOrigin::Reduced {
                    r.mem_bytes_read += m;
                }
                r.network_bytes_sent += m;
                r.bus_npu_afi_bytes += m;
            }
            Action::RecvMsg { msg, .. } => {
                let m = msg_bytes(msg);
                r.mem_bytes_written += m;
                r.bus_npu_afi_bytes += m;
            }
            Action::ReduceLocal { msg, persist } => {
                let m = msg_bytes(msg);
                r.mem_bytes_read += 2 * m;
                if persist {
                    r.mem_bytes_written += m;
                }
            }
            Action::StoreFinal { .. } | Action::LoadFromMemory { .. } | Action::WriteToMemory { .. } => {}
        }
    }
    r.bus_npu_mem_bytes = r.mem_bytes_read + r.mem_bytes_written;
    r
}

/// Memory traffic of the offload datapath: one DMA in, one DMA out.
pub fn ace_traffic(schedule: &CollectiveSchedule) -> TrafficReport {
    let mut r = TrafficReport::default();
    for s in &schedule.steps {
        match s.action {
            Action::LoadFromMemory { bytes } => r.mem_bytes_read += bytes,
            Action::WriteToMemory { bytes } => r.mem_bytes_written += bytes,
            Action::SendMsg { msg, .. } => r.network_bytes_sent += schedule.messages[msg as usize].bytes,
            _ => {}
        }
    }
    r.bus_npu_mem_bytes = r.mem_bytes_read + r.mem_bytes_written;
    r.bus_npu_afi_bytes = r.bus_npu_mem_bytes;
    // one chunk's largest footprint on a node: a phase's input plus its result
    r.sram_bytes_peak = schedule
        .phases
        .iter()
        .map(|p| p.input_bytes + p.output_bytes)
        .max()
        .unwrap_or(0);
    r
}

/// Compute time once some SMs and memory bandwidth are handed to
/// communication: the slower of the two remaining shares sets the pace.
pub fn effective_compute_time(base_cycles: Cycles, budget: &ResourceBudget) -> Result<Cycles, ConfigError> {
    Ok((base_cycles as f64 * compute_slowdown(budget)?).round() as Cycles)
}

pub fn compute_slowdown(budget: &ResourceBudget) -> Result<f64, ConfigError> {
    if budget.sm_comm >= budget.sm_total {
        return Err(ConfigError::invalid("endpoint.sm_comm", "no SMs left for compute"));
    }
    if budget.mem_bw_comm_gbps >= budget.mem_bw_total_gbps {
        return Err(ConfigError::invalid(
            "endpoint.mem_bw_comm_gbps",
            "no memory bandwidth left for compute",
        ));
    }
    let sm = budget.sm_total as f64 / (budget.sm_total - budget.sm_comm) as f64;
    let mem = budget.mem_bw_total_gbps / (budget.mem_bw_total_gbps - budget.mem_bw_comm_gbps);
    Ok(sm.max(mem))
}
