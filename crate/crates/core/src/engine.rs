//! Deterministic discrete-event core.
//!
//! Chunks of issued collectives are admitted into a bounded window in LIFO
//! order. Each admitted chunk runs a shared step template; every step is a
//! short chain of channel transfers (memory, buses, SRAM ports, ALU, link).
//! Events are ordered by `(time, sequence)` so runs are bit-reproducible.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::sync::Arc;

use serde::Serialize;

use crate::collectives::{
    plan_collective, Action, ChunkPlan, CollectiveKind, CollectiveSchedule, SendOrigin, StepId,
};
use crate::endpoint::{
    partition_sram, split_sram, AceConfig, Datapath, FsmAllocation, PartitionPolicy, PhaseDemand, ResourceBudget,
    TrafficReport,
};
use crate::error::{ConfigError, Deadlock};
use crate::topology::{Dir, LinkKind, Topology};
use crate::units::{gbps_to_bytes_per_mcycle, Cycles, KIB, TICKS_PER_CYCLE};

/// A FIFO bandwidth-latency resource.
///
/// Rates are integer bytes per mega-cycle and occupancy is tracked in
/// ticks of 1e-6 cycle, so back-to-back transfers do not lose time to
/// rounding.
#[derive(Debug, Clone)]
pub struct Channel {
    rate: u64,
    latency: Cycles,
    busy_until: u64,
    pub bytes: u64,
    pub transfers: u64,
}

/// Outcome of one [`Channel::submit_transfer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transfer {
    pub start_tick: u64,
    pub end_tick: u64,
    /// Cycle at which the last byte has left the channel.
    pub injected: Cycles,
    /// Cycle at which the last byte is delivered (adds the latency).
    pub completion: Cycles,
}

impl Channel {
    pub fn new(rate_bytes_per_mcycle: u64, latency: Cycles) -> Channel {
        assert!(rate_bytes_per_mcycle > 0, "channel rate must be positive");
        Channel {
            rate: rate_bytes_per_mcycle,
            latency,
            busy_until: 0,
            bytes: 0,
            transfers: 0,
        }
    }

    pub fn from_gbps(gbps: f64, latency: Cycles) -> Channel {
        Channel::new(gbps_to_bytes_per_mcycle(gbps), latency)
    }

    pub fn busy_until_tick(&self) -> u64 {
        self.busy_until
    }

    /// Occupancy of `bytes` in ticks.
    pub fn occupancy_ticks(&self, bytes: u64) -> u64 {
        let t = bytes as u128 * 1_000_000u128 * TICKS_PER_CYCLE as u128;
        t.div_ceil(self.rate as u128) as u64
    }

    pub fn submit_transfer(&mut self, bytes: u64, now: Cycles) -> Transfer {
        let start = self.busy_until.max(now * TICKS_PER_CYCLE);
        let end = start + self.occupancy_ticks(bytes);
        self.busy_until = end;
        self.bytes += bytes;
        self.transfers += 1;
        let injected = end.div_ceil(TICKS_PER_CYCLE);
        Transfer {
            start_tick: start,
            end_tick: end,
            injected,
            completion: injected + self.latency,
        }
    }
}

/// Engine parameters shared by every run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineConfig {
    pub datapath: Datapath,
    pub budget: ResourceBudget,
    pub ace: AceConfig,
    pub chunk_bytes: u64,
    pub message_bytes: u64,
    pub packet_bytes: u64,
    /// Chunks that may be in flight at once across all collectives.
    pub max_inflight_chunks: usize,
    pub link_arbitration: LinkArbitration,
    pub window_cycles: Cycles,
}

/// How a link picks among messages waiting to be injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkArbitration {
    /// Messages go onto the wire in the order they became ready.
    Fifo,
    /// The message of the earliest admitted chunk goes first.
    #[default]
    OldestChunk,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            datapath: Datapath::Ideal,
            budget: ResourceBudget::default(),
            ace: AceConfig::default(),
            chunk_bytes: ChunkPlan::DEFAULT_CHUNK_BYTES,
            message_bytes: ChunkPlan::DEFAULT_MESSAGE_BYTES,
            packet_bytes: ChunkPlan::DEFAULT_PACKET_BYTES,
            max_inflight_chunks: 32,
            link_arbitration: LinkArbitration::default(),
            window_cycles: 1000,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.budget.validate()?;
        self.ace.validate()?;
        for (k, v) in [
            ("workload.chunk_kib", self.chunk_bytes),
            ("workload.message_kib", self.message_bytes),
            ("workload.packet_bytes", self.packet_bytes),
            ("analytics.window_cycles", self.window_cycles),
        ] {
            if v == 0 {
                return Err(ConfigError::invalid(k, "must be positive"));
            }
        }
        if self.max_inflight_chunks == 0 {
            return Err(ConfigError::invalid("workload.max_inflight_chunks", "must be positive"));
        }
        Ok(())
    }
}

pub type CollId = u32;

/// Service order for pending collectives: the most recently issued one
/// with chunks left is served first.
#[derive(Debug, Clone, Default)]
pub struct LifoQueue {
    stack: Vec<CollId>,
}

impl LifoQueue {
    pub fn push(&mut self, id: CollId) {
        self.stack.push(id);
    }

    pub fn peek(&self) -> Option<CollId> {
        self.stack.last().copied()
    }

    /// Removes `id` once all its chunks have been handed out.
    pub fn retire(&mut self, id: CollId) {
        if let Some(i) = self.stack.iter().rposition(|&c| c == id) {
            self.stack.remove(i);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.stack.is_empty()
    }

    pub fn len(&self) -> usize {
        self.stack.len()
    }
}

/// Callbacks from the event loop to whatever drives the collectives.
pub trait Driver {
    fn start(&mut self, eng: &mut Engine);
    fn timer(&mut self, _eng: &mut Engine, _token: u64) {}
    fn collective_done(&mut self, _eng: &mut Engine, _id: CollId) {}
}

/// Issues one collective at time zero.
pub struct SingleCollective {
    pub kind: CollectiveKind,
    pub payload_bytes: u64,
}

impl Driver for SingleCollective {
    fn start(&mut self, eng: &mut Engine) {
        eng.issue(self.kind, self.payload_bytes);
    }
}

/// Runs a caller-provided schedule once, unvalidated.
pub struct CustomSchedule(pub Option<CollectiveSchedule>);

impl Driver for CustomSchedule {
    fn start(&mut self, eng: &mut Engine) {
        if let Some(s) = self.0.take() {
            eng.issue_schedule(s);
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CollectiveRecord {
    pub id: CollId,
    pub kind: CollectiveKind,
    pub payload_bytes: u64,
    pub chunks: u64,
    pub issued: Cycles,
    pub finished: Option<Cycles>,
}

impl CollectiveRecord {
    pub fn latency(&self) -> Option<Cycles> {
        self.finished.map(|f| f - self.issued)
    }
}

/// Everything a finished run measured.
#[derive(Debug, Clone, Serialize)]
pub struct EngineReport {
    pub finish: Cycles,
    pub traffic: TrafficReport,
    /// Payload bytes (padding excluded) delivered over links, all hops.
    pub delivered_payload_bytes: u64,
    pub link_count: usize,
    pub window_cycles: Cycles,
    /// Sum of link busy time per window, in ticks.
    pub link_busy_ticks: Vec<u64>,
    pub collectives: Vec<CollectiveRecord>,
    pub reduced_bytes: u64,
    pub packets: u64,
    pub events: u64,
}

impl EngineReport {
    /// Average fraction of links busy in each window.
    pub fn utilization(&self) -> Vec<f64> {
        let windows = self.finish.div_ceil(self.window_cycles) as usize;
        let denom = (self.link_count as u64 * self.window_cycles * TICKS_PER_CYCLE) as f64;
        (0..windows)
            .map(|w| {
                let b = self.link_busy_ticks.get(w).copied().unwrap_or(0);
                if denom > 0.0 {
                    (b as f64 / denom).min(1.0)
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Delivered payload per node in GB/s.
    pub fn effective_gbps(&self, nodes: usize) -> f64 {
        if self.finish == 0 || nodes == 0 {
            return 0.0;
        }
        crate::units::bytes_per_cycle_to_gbps(self.delivered_payload_bytes as f64 / self.finish as f64 / nodes as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ChanKind {
    Link,
    MemRd,
    MemWr,
    AfiTx,
    AfiRx,
    Alu,
    SramRd,
    SramWr,
}

const DELAY: u32 = u32::MAX;

#[derive(Clone, Copy, Default)]
struct Stages {
    n: u8,
    s: [(u32, u64); 3],
}

impl Stages {
    fn push(&mut self, chan: u32, bytes: u64) {
        if bytes > 0 || chan == DELAY {
            self.s[self.n as usize] = (chan, bytes);
            self.n += 1;
        }
    }
}

/// Per-step data of one chunk schedule, shared by every chunk using it.
struct Template {
    kind: CollectiveKind,
    node: Vec<u32>,
    gate: Vec<u8>,
    action: Vec<Action>,
    dep_count: Vec<u16>,
    dep_start: Vec<u32>,
    dependents: Vec<u32>,
    recv_of: Vec<u32>,
    msg_bytes: Vec<u64>,
    msg_payload: Vec<u64>,
    msg_link: Vec<u32>,
    /// Steps per (node, gate).
    np_count: Vec<u32>,
    roots: Vec<u32>,
    /// Bytes reserved per node in each gate's partition.
    gate_bytes: Vec<u64>,
    /// Gates visited, in order.
    gate_order: Vec<u8>,
}

impl Template {
    fn build(s: &CollectiveSchedule, topo: &Topology, gates: usize) -> Template {
        let n = s.steps.len();
        let nodes = s.node_count;
        let terminal = (gates - 1) as u8;
        let dims = topo.dims();
        let mut recv_of = vec![u32::MAX; s.messages.len()];
        let mut msg_link = vec![u32::MAX; s.messages.len()];
        for m in &s.messages {
            msg_link[m.id as usize] = topo
                .port(dims.node(m.src), m.dim, m.dir)
                .map(|l| l as u32)
                .unwrap_or(u32::MAX);
        }
        let mut gate = vec![0u8; n];
        for st in &s.steps {
            if let Action::RecvMsg { msg, .. } = st.action {
                recv_of[msg as usize] = st.id;
            }
            gate[st.id as usize] = match st.action {
                Action::WriteToMemory { .. } => terminal,
                _ => st.phase.min(terminal.saturating_sub(1)),
            };
        }
        let is_send_to_recv = |from: StepId, to: StepId| -> bool {
            if let Action::SendMsg { msg, .. } = s.steps[from as usize].action {
                recv_of[msg as usize] == to
            } else {
                false
            }
        };
        let mut dep_count = vec![0u16; n];
        let mut dep_start = vec![0u32; n + 1];
        for st in &s.steps {
            dep_count[st.id as usize] = st.deps.len() as u16;
            for &d in &st.deps {
                if !is_send_to_recv(d, st.id) {
                    dep_start[d as usize + 1] += 1;
                }
            }
        }
        for i in 0..n {
            dep_start[i + 1] += dep_start[i];
        }
        let mut fill = dep_start.clone();
        let mut dependents = vec![0u32; dep_start[n] as usize];
        for st in &s.steps {
            for &d in &st.deps {
                if !is_send_to_recv(d, st.id) {
                    dependents[fill[d as usize] as usize] = st.id;
                    fill[d as usize] += 1;
                }
            }
        }
        let mut np_count = vec![0u32; nodes * gates];
        for st in &s.steps {
            np_count[st.node * gates + gate[st.id as usize] as usize] += 1;
        }
        let mut gate_bytes = vec![0u64; gates];
        for (p, info) in s.phases.iter().enumerate().take(gates - 1) {
            gate_bytes[p] = info.input_bytes;
        }
        gate_bytes[gates - 1] = s.result.iter().map(|r| r.end - r.start).max().unwrap_or(0);
        let mut gate_order: Vec<u8> = gate.clone();
        gate_order.sort_unstable();
        gate_order.dedup();
        Template {
            kind: s.kind,
            node: s.steps.iter().map(|st| st.node as u32).collect(),
            gate,
            action: s.steps.iter().map(|st| st.action).collect(),
            roots: s.steps.iter().filter(|st| st.deps.is_empty()).map(|st| st.id).collect(),
            dep_count,
            dep_start,
            dependents,
            recv_of,
            msg_bytes: s.messages.iter().map(|m| m.bytes).collect(),
            msg_payload: s.messages.iter().map(|m| m.bytes - m.padding).collect(),
            msg_link,
            np_count,
            gate_bytes,
            gate_order,
        }
    }

    fn dependents(&self, step: u32) -> &[u32] {
        &self.dependents[self.dep_start[step as usize] as usize..self.dep_start[step as usize + 1] as usize]
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum GateState {
    Idle,
    Waiting,
    Granted,
}

struct Instance {
    tpl: Arc<Template>,
    coll: CollId,
    chunk: u64,
    order: u64,
    pending: Vec<u16>,
    remaining: u32,
    np_left: Vec<u32>,
    tickets: Vec<u64>,
    gate_state: Vec<GateState>,
    parked: HashMap<u32, Vec<u32>>,
    /// Partition bytes held per node: (gate, bytes).
    held: Vec<Option<(u8, u64)>>,
}

struct CollState {
    record: CollectiveRecord,
    chunk_bytes: u64,
    admitted: u64,
    done: u64,
    custom: Option<Arc<Template>>,
}

struct Gate {
    next_ticket: u64,
    waiting: BTreeMap<u64, u32>,
    fsm_busy: Vec<u32>,
    used: u64,
}

struct AceState {
    alloc: FsmAllocation,
    partitions: Vec<u64>,
    tickets: Vec<u64>,
    depth: u32,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EvKind {
    Stage { inst: u32, step: u32, stage: u8 },
    SendDone { inst: u32, step: u32, link: u32 },
    Arrive { inst: u32, msg: u32 },
    Timer(u64),
    CollDone(CollId),
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Ev {
    time: Cycles,
    seq: u64,
    kind: EvKind,
}

#[derive(Default)]
struct LinkArb {
    busy: bool,
    waiting: BinaryHeap<Reverse<(u64, u64, u32, u32)>>,
}

enum Work {
    Ready(u32, u32),
    Stage(u32, u32, u8),
    Complete(u32, u32),
}

/// One simulation: a topology, an endpoint model and the event loop state.
pub struct Engine {
    cfg: EngineConfig,
    topo: Topology,
    now: Cycles,
    seq: u64,
    events: u64,
    heap: BinaryHeap<Reverse<Ev>>,
    channels: Vec<Channel>,
    kinds: Vec<ChanKind>,
    node_base: usize,
    per_node: usize,
    gates_n: usize,
    instances: Vec<Option<Instance>>,
    free: Vec<u32>,
    colls: Vec<CollState>,
    lifo: LifoQueue,
    inflight: usize,
    admitted_total: u64,
    admissions: Vec<(CollId, u64)>,
    arb: Vec<LinkArb>,
    templates: HashMap<(CollectiveKind, u64, Dir), Arc<Template>>,
    gates: Vec<Gate>,
    ace: Option<AceState>,
    work: Vec<Work>,
    busy: Vec<u64>,
    delivered: u64,
    reduced: u64,
    packets: u64,
    sram_used: Vec<u64>,
    sram_peak: u64,
}

impl Engine {
    pub fn new(cfg: EngineConfig, topo: Topology) -> Result<Engine, ConfigError> {
        cfg.validate()?;
        let nodes = topo.node_count();
        let mut channels = Vec::new();
        let mut kinds = Vec::new();
        for l in topo.links() {
            channels.push(Channel::new(l.class.effective_rate(), l.class.latency_cycles));
            kinds.push(ChanKind::Link);
        }
        let node_base = channels.len();

        // Gates and partitions follow the all-reduce phase structure.
        let reference = plan_collective(
            CollectiveKind::AllReduce,
            &topo,
            &ChunkPlan::new(cfg.chunk_bytes).with_message_bytes(cfg.message_bytes),
            Dir::Up,
        );
        let phases = reference.phase_count().max(1);
        let gates_n = phases + 1;

        let b = &cfg.budget;
        let mut per_node_chans: Vec<(ChanKind, f64, u64)> = Vec::new();
        let mut ace = None;
        match cfg.datapath {
            Datapath::Baseline => {
                let comm = b.baseline_comm_gbps();
                if comm <= 0.0 {
                    return Err(ConfigError::invalid(
                        "endpoint.mem_bw_comm_gbps",
                        "baseline needs communication memory bandwidth and at least one SM",
                    ));
                }
                per_node_chans.push((ChanKind::MemRd, comm, 0));
                per_node_chans.push((ChanKind::MemWr, comm, 0));
                per_node_chans.push((ChanKind::AfiTx, b.bus_npu_afi_gbps, 0));
                per_node_chans.push((ChanKind::AfiRx, b.bus_npu_afi_gbps, 0));
            }
            Datapath::Ace => {
                if b.mem_bw_comm_gbps <= 0.0 {
                    return Err(ConfigError::invalid(
                        "endpoint.mem_bw_comm_gbps",
                        "the offload engine needs DMA bandwidth",
                    ));
                }
                let a = &cfg.ace;
                let port = crate::units::bytes_per_cycle_to_gbps(a.sram_port_bytes as f64);
                per_node_chans.push((ChanKind::MemRd, b.mem_bw_comm_gbps, 0));
                per_node_chans.push((ChanKind::MemWr, b.mem_bw_comm_gbps, 0));
                per_node_chans.push((
                    ChanKind::Alu,
                    crate::units::bytes_per_cycle_to_gbps(a.alu_bytes_per_cycle() as f64),
                    0,
                ));
                for _ in 0..gates_n {
                    per_node_chans.push((ChanKind::SramRd, port, 0));
                }
                for _ in 0..gates_n {
                    per_node_chans.push((ChanKind::SramWr, port, 0));
                }
                let demands: Vec<PhaseDemand> = reference
                    .phases
                    .iter()
                    .map(|p| {
                        let dim = p.dim.expect("ring phase");
                        let class = topo.links().iter().find(|l| l.dim == dim).map(|l| l.class);
                        PhaseDemand {
                            bandwidth_gbps: class.map(|c| 2.0 * c.gbps).unwrap_or(1.0),
                            chunk_bytes: p.input_bytes,
                            message_bytes: p.message_bytes,
                        }
                    })
                    .collect();
                let alloc = a.fsm_allocation(phases)?;
                let partitions: Vec<u64> = if demands.is_empty() {
                    vec![a.sram_bytes / 2, a.sram_bytes / 2]
                } else {
                    let ranges = match a.partition_policy {
                        PartitionPolicy::BandwidthChunk => partition_sram(a.sram_bytes, &demands, cfg.packet_bytes)?,
                        PartitionPolicy::InFlight => {
                            let depth = a.chunks_per_fsm as u64;
                            let mut w: Vec<u64> = reference
                                .phases
                                .iter()
                                .zip(&alloc.per_phase)
                                .map(|(p, &f)| f as u64 * depth * p.input_bytes)
                                .collect();
                            // results wait here for the write-back; size it like the phase feeding it
                            let last = *alloc.per_phase.last().unwrap() as u64;
                            w.push(last * depth * reference.padded_bytes);
                            split_sram(a.sram_bytes, &w, cfg.packet_bytes)
                        }
                    };
                    ranges.into_iter().map(|r| r.end - r.start).collect()
                };
                // every partition must hold one chunk so the oldest chunk can always advance
                let mut need = vec![0u64; gates_n];
                for (p, info) in reference.phases.iter().enumerate() {
                    need[p] = info.input_bytes;
                }
                need[0] = need[0].max(reference.padded_bytes);
                need[gates_n - 1] = reference.padded_bytes;
                for (g, (&have, &want)) in partitions.iter().zip(&need).enumerate() {
                    if have < want {
                        return Err(ConfigError::invalid(
                            "ace.sram_mib",
                            format!("partition {g} holds {have} bytes, one chunk needs {want}"),
                        ));
                    }
                }
                ace = Some(AceState {
                    alloc,
                    partitions,
                    tickets: vec![0; gates_n],
                    depth: a.chunks_per_fsm as u32,
                });
            }
            Datapath::Ideal => {}
        }
        let per_node = per_node_chans.len();
        for _ in 0..nodes {
            for &(k, gbps, lat) in &per_node_chans {
                channels.push(Channel::from_gbps(gbps, lat));
                kinds.push(k);
            }
        }
        let gates = match &ace {
            Some(a) => (0..nodes * gates_n)
                .map(|i| {
                    let g = i % gates_n;
                    let fsms = if g + 1 < gates_n { a.alloc.per_phase[g] } else { 0 };
                    Gate {
                        next_ticket: 0,
                        waiting: BTreeMap::new(),
                        fsm_busy: vec![0; fsms],
                        used: 0,
                    }
                })
                .collect(),
            None => Vec::new(),
        };
        Ok(Engine {
            cfg,
            topo,
            now: 0,
            seq: 0,
            events: 0,
            heap: BinaryHeap::new(),
            channels,
            kinds,
            node_base,
            per_node,
            gates_n,
            instances: Vec::new(),
            free: Vec::new(),
            colls: Vec::new(),
            lifo: LifoQueue::default(),
            inflight: 0,
            admitted_total: 0,
            admissions: Vec::new(),
            arb: (0..node_base).map(|_| LinkArb::default()).collect(),
            templates: HashMap::new(),
            gates,
            ace,
            work: Vec::new(),
            busy: Vec::new(),
            delivered: 0,
            reduced: 0,
            packets: 0,
            sram_used: vec![0; nodes],
            sram_peak: 0,
        })
    }

    pub fn now(&self) -> Cycles {
        self.now
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    /// SRAM partition sizes in use, if the datapath has any.
    pub fn partitions(&self) -> Option<&[u64]> {
        self.ace.as_ref().map(|a| a.partitions.as_slice())
    }

    fn push(&mut self, time: Cycles, kind: EvKind) {
        self.seq += 1;
        self.heap.push(Reverse(Ev {
            time,
            seq: self.seq,
            kind,
        }));
    }

    pub fn set_timer(&mut self, at: Cycles, token: u64) {
        let at = at.max(self.now);
        self.push(at, EvKind::Timer(token));
    }

    /// Chunk size used for collectives of `kind`.
    ///
    /// All-to-all chunks grow until every destination's share fills a
    /// message; smaller shares only multiply per-message overheads.
    pub fn chunk_bytes_for(&self, kind: CollectiveKind) -> u64 {
        let c = self.cfg.chunk_bytes;
        if kind != CollectiveKind::AllToAll {
            return c;
        }
        let n = self.topo.node_count() as u64;
        let mut want = c.max(n * self.cfg.message_bytes);
        if let Some(a) = &self.ace {
            let room = a.partitions[0].min(*a.partitions.last().unwrap());
            // leave space for a full FSM queue plus one
            let div = self.cfg.ace.chunks_per_fsm as u64 + 1;
            want = want.min(room / div / n * n);
        }
        want.max(c)
    }

    /// Issues a collective of `payload_bytes` per node; returns its id.
    pub fn issue(&mut self, kind: CollectiveKind, payload_bytes: u64) -> CollId {
        let id = self.colls.len() as CollId;
        let chunk_bytes = self.chunk_bytes_for(kind);
        let chunks = if self.topo.node_count() < 2 {
            0
        } else {
            payload_bytes.div_ceil(chunk_bytes)
        };
        self.colls.push(CollState {
            record: CollectiveRecord {
                id,
                kind,
                payload_bytes,
                chunks,
                issued: self.now,
                finished: None,
            },
            chunk_bytes,
            admitted: 0,
            done: 0,
            custom: None,
        });
        if chunks == 0 {
            self.colls[id as usize].record.finished = Some(self.now);
            self.push(self.now, EvKind::CollDone(id));
        } else {
            self.lifo.push(id);
            self.admit();
            self.drain();
        }
        id
    }

    /// Issues a single-chunk collective running `schedule` as given.
    pub fn issue_schedule(&mut self, schedule: CollectiveSchedule) -> CollId {
        let tpl = Arc::new(Template::build(&schedule, &self.topo, self.gates_n));
        let id = self.colls.len() as CollId;
        self.colls.push(CollState {
            record: CollectiveRecord {
                id,
                kind: schedule.kind,
                payload_bytes: schedule.plan.payload_bytes,
                chunks: 1,
                issued: self.now,
                finished: None,
            },
            chunk_bytes: schedule.plan.payload_bytes,
            admitted: 0,
            done: 0,
            custom: Some(tpl),
        });
        self.lifo.push(id);
        self.admit();
        self.drain();
        id
    }

    pub fn record(&self, id: CollId) -> &CollectiveRecord {
        &self.colls[id as usize].record
    }

    /// Every chunk admitted so far as (collective, chunk index), in order.
    pub fn admissions(&self) -> &[(CollId, u64)] {
        &self.admissions
    }

    pub fn is_done(&self, id: CollId) -> bool {
        self.colls[id as usize].record.finished.is_some()
    }

    fn template(&mut self, kind: CollectiveKind, payload: u64, dir: Dir) -> Arc<Template> {
        let dir = if kind == CollectiveKind::AllToAll { Dir::Up } else { dir };
        if let Some(t) = self.templates.get(&(kind, payload, dir)) {
            return t.clone();
        }
        let plan = ChunkPlan::new(payload).with_message_bytes(self.cfg.message_bytes);
        let s = plan_collective(kind, &self.topo, &plan, dir);
        let t = Arc::new(Template::build(&s, &self.topo, self.gates_n));
        self.templates.insert((kind, payload, dir), t.clone());
        t
    }

    fn admit(&mut self) {
        while self.inflight < self.cfg.max_inflight_chunks {
            let Some(cid) = self.lifo.peek() else { break };
            let c = &self.colls[cid as usize];
            let chunk = c.admitted;
            let tpl = match &c.custom {
                Some(t) => t.clone(),
                None => {
                    let kind = c.record.kind;
                    let size = (c.record.payload_bytes - chunk * c.chunk_bytes).min(c.chunk_bytes);
                    let dir = if chunk % 2 == 0 { Dir::Up } else { Dir::Down };
                    self.template(kind, size, dir)
                }
            };
            let c = &mut self.colls[cid as usize];
            c.admitted += 1;
            if c.admitted == c.record.chunks {
                self.lifo.retire(cid);
            }
            self.inflight += 1;
            self.admissions.push((cid, chunk));
            self.spawn(cid, chunk, tpl);
        }
    }

    fn spawn(&mut self, coll: CollId, chunk: u64, tpl: Arc<Template>) {
        let nodes = self.topo.node_count();
        let mut tickets = vec![u64::MAX; self.gates_n];
        if let Some(a) = &mut self.ace {
            for &g in &tpl.gate_order {
                tickets[g as usize] = a.tickets[g as usize];
                a.tickets[g as usize] += 1;
            }
        }
        self.admitted_total += 1;
        let inst = Instance {
            pending: tpl.dep_count.clone(),
            remaining: tpl.node.len() as u32,
            np_left: tpl.np_count.clone(),
            tickets,
            gate_state: vec![GateState::Idle; nodes * self.gates_n],
            parked: HashMap::new(),
            held: vec![None; nodes],
            coll,
            chunk,
            order: self.admitted_total,
            tpl: tpl.clone(),
        };
        let id = match self.free.pop() {
            Some(i) => {
                self.instances[i as usize] = Some(inst);
                i
            }
            None => {
                self.instances.push(Some(inst));
                (self.instances.len() - 1) as u32
            }
        };
        if tpl.node.is_empty() {
            self.finish_instance(id);
            return;
        }
        for &r in &tpl.roots {
            self.work.push(Work::Ready(id, r));
        }
    }

    fn chan(&self, node: u32, offset: usize) -> u32 {
        (self.node_base + node as usize * self.per_node + offset) as u32
    }

    fn stages(&self, tpl: &Template, step: u32) -> Stages {
        let node = tpl.node[step as usize];
        let mut st = Stages::default();
        let mb = |m: u32| tpl.msg_bytes[m as usize];
        match self.cfg.datapath {
            Datapath::Ideal => match tpl.action[step as usize] {
                Action::SendMsg { msg, .. } => st.push(tpl.msg_link[msg as usize], mb(msg)),
                Action::RecvMsg { .. } => st.push(DELAY, 1),
                _ => {}
            },
            Datapath::Baseline => {
                let (rd, wr, tx, rx) = (self.chan(node, 0), self.chan(node, 1), self.chan(node, 2), self.chan(node, 3));
                match tpl.action[step as usize] {
                    Action::SendMsg { msg, origin, .. } => {
                        if origin != SendOrigin::Reduced {
                            st.push(rd, mb(msg));
                        }
                        st.push(tx, mb(msg));
                        st.push(tpl.msg_link[msg as usize], mb(msg));
                    }
                    Action::RecvMsg { msg, .. } => {
                        st.push(rx, mb(msg));
                        st.push(wr, mb(msg));
                    }
                    Action::ReduceLocal { msg, persist } => {
                        st.push(rd, 2 * mb(msg));
                        if persist {
                            st.push(wr, mb(msg));
                        }
                    }
                    _ => {}
                }
            }
            Datapath::Ace => {
                let g = tpl.gate[step as usize] as usize;
                let (rd, wr, alu) = (self.chan(node, 0), self.chan(node, 1), self.chan(node, 2));
                let srd = |p: usize| self.chan(node, 3 + p);
                let swr = |p: usize| self.chan(node, 3 + self.gates_n + p);
                match tpl.action[step as usize] {
                    Action::LoadFromMemory { bytes } => {
                        st.push(rd, bytes);
                        st.push(swr(g), bytes);
                    }
                    Action::SendMsg { msg, .. } => {
                        st.push(srd(g), mb(msg));
                        st.push(tpl.msg_link[msg as usize], mb(msg));
                    }
                    Action::RecvMsg { msg, .. } => st.push(swr(g), mb(msg)),
                    Action::ReduceLocal { msg, .. } => {
                        st.push(srd(g), 2 * mb(msg));
                        st.push(alu, mb(msg));
                        st.push(swr(g), mb(msg));
                    }
                    Action::StoreFinal { .. } => {}
                    Action::WriteToMemory { bytes } => {
                        st.push(srd(g), bytes);
                        st.push(wr, bytes);
                    }
                }
            }
        }
        st
    }

    fn add_busy(&mut self, start: u64, end: u64) {
        let w = self.cfg.window_cycles * TICKS_PER_CYCLE;
        let mut s = start;
        while s < end {
            let idx = (s / w) as usize;
            let stop = ((idx as u64 + 1) * w).min(end);
            if self.busy.len() <= idx {
                self.busy.resize(idx + 1, 0);
            }
            self.busy[idx] += stop - s;
            s = stop;
        }
    }

    fn drain(&mut self) {
        while let Some(w) = self.work.pop() {
            match w {
                Work::Ready(i, s) => self.ready(i, s),
                Work::Stage(i, s, k) => self.run_stage(i, s, k),
                Work::Complete(i, s) => self.complete(i, s),
            }
        }
    }

    fn ready(&mut self, i: u32, step: u32) {
        if self.ace.is_some() {
            let inst = self.instances[i as usize].as_mut().unwrap();
            let node = inst.tpl.node[step as usize] as usize;
            let g = inst.tpl.gate[step as usize] as usize;
            let key = node * self.gates_n + g;
            match inst.gate_state[key] {
                GateState::Granted => {}
                GateState::Waiting => {
                    inst.parked.entry(key as u32).or_default().push(step);
                    return;
                }
                GateState::Idle => {
                    inst.gate_state[key] = GateState::Waiting;
                    inst.parked.entry(key as u32).or_default().push(step);
                    let ticket = inst.tickets[g];
                    self.gates[key].waiting.insert(ticket, i);
                    self.try_grant(key);
                    return;
                }
            }
        }
        self.work.push(Work::Stage(i, step, 0));
    }

    fn try_grant(&mut self, first: usize) {
        let mut todo = vec![first];
        while let Some(key) = todo.pop() {
            loop {
                let ace = self.ace.as_ref().unwrap();
                let gate = &self.gates[key];
                let Some((&ticket, &inst_id)) = gate.waiting.first_key_value() else { break };
                if ticket != gate.next_ticket {
                    break;
                }
                let g = key % self.gates_n;
                let node = key / self.gates_n;
                let inst = self.instances[inst_id as usize].as_ref().unwrap();
                let bytes = inst.tpl.gate_bytes[g];
                let fsm = if gate.fsm_busy.is_empty() {
                    None
                } else {
                    let f = ace.alloc.assign(ticket, g);
                    if gate.fsm_busy[f] >= ace.depth {
                        break;
                    }
                    Some(f)
                };
                if gate.used + bytes > ace.partitions[g] {
                    break;
                }
                let gate = &mut self.gates[key];
                gate.waiting.pop_first();
                gate.next_ticket += 1;
                gate.used += bytes;
                if let Some(f) = fsm {
                    gate.fsm_busy[f] += 1;
                }
                self.sram_used[node] += bytes;
                self.sram_peak = self.sram_peak.max(self.sram_used[node]);
                let inst = self.instances[inst_id as usize].as_mut().unwrap();
                inst.gate_state[key] = GateState::Granted;
                if let Some((pg, pb)) = inst.held[node].replace((g as u8, bytes)) {
                    let pkey = node * self.gates_n + pg as usize;
                    self.gates[pkey].used -= pb;
                    self.sram_used[node] -= pb;
                    todo.push(pkey);
                }
                if let Some(steps) = inst.parked.remove(&(key as u32)) {
                    for s in steps {
                        self.work.push(Work::Stage(inst_id, s, 0));
                    }
                }
            }
        }
    }

    fn run_stage(&mut self, i: u32, step: u32, k: u8) {
        let tpl = self.instances[i as usize].as_ref().unwrap().tpl.clone();
        let st = self.stages(&tpl, step);
        if k >= st.n {
            self.work.push(Work::Complete(i, step));
            return;
        }
        let (chan, bytes) = st.s[k as usize];
        if chan == DELAY {
            self.push(self.now + bytes, EvKind::Stage { inst: i, step, stage: k + 1 });
            return;
        }
        if self.kinds[chan as usize] == ChanKind::Link {
            let arb = &mut self.arb[chan as usize];
            if self.cfg.link_arbitration == LinkArbitration::OldestChunk && arb.busy {
                let order = self.instances[i as usize].as_ref().unwrap().order;
                self.seq += 1;
                arb.waiting.push(Reverse((order, self.seq, i, step)));
            } else {
                self.inject(chan, i, step, bytes);
            }
            return;
        }
        let t = self.channels[chan as usize].submit_transfer(bytes, self.now);
        match self.kinds[chan as usize] {
            ChanKind::Alu => {
                self.reduced += bytes;
                self.push(t.completion, EvKind::Stage { inst: i, step, stage: k + 1 });
            }
            _ => self.push(t.completion, EvKind::Stage { inst: i, step, stage: k + 1 }),
        }
    }

    fn inject(&mut self, link: u32, i: u32, step: u32, bytes: u64) {
        let tpl = &self.instances[i as usize].as_ref().unwrap().tpl;
        let Action::SendMsg { msg, .. } = tpl.action[step as usize] else {
            unreachable!("links carry sends")
        };
        let t = self.channels[link as usize].submit_transfer(bytes, self.now);
        self.arb[link as usize].busy = true;
        self.add_busy(t.start_tick, t.end_tick);
        self.packets += bytes.div_ceil(self.cfg.packet_bytes);
        self.push(t.injected, EvKind::SendDone { inst: i, step, link });
        self.push(t.completion, EvKind::Arrive { inst: i, msg });
    }

    fn link_free(&mut self, link: u32) {
        let arb = &mut self.arb[link as usize];
        match arb.waiting.pop() {
            Some(Reverse((_, _, i, step))) => {
                let Action::SendMsg { msg, .. } = self.instances[i as usize].as_ref().unwrap().tpl.action[step as usize]
                else {
                    unreachable!("links carry sends")
                };
                let bytes = self.instances[i as usize].as_ref().unwrap().tpl.msg_bytes[msg as usize];
                self.inject(link, i, step, bytes);
            }
            None => arb.busy = false,
        }
    }

    fn complete(&mut self, i: u32, step: u32) {
        let gates_n = self.gates_n;
        let inst = self.instances[i as usize].as_mut().unwrap();
        let tpl = inst.tpl.clone();
        inst.remaining -= 1;
        for &d in tpl.dependents(step) {
            inst.pending[d as usize] -= 1;
            if inst.pending[d as usize] == 0 {
                self.work.push(Work::Ready(i, d));
            }
        }
        if self.ace.is_some() {
            let node = tpl.node[step as usize] as usize;
            let g = tpl.gate[step as usize] as usize;
            let key = node * gates_n + g;
            inst.np_left[key] -= 1;
            if inst.np_left[key] == 0 {
                let ticket = inst.tickets[g];
                let terminal = g + 1 == gates_n;
                let held = if terminal { inst.held[node].take() } else { None };
                if let Some((_, b)) = held {
                    self.gates[key].used -= b;
                    self.sram_used[node] -= b;
                }
                if !self.gates[key].fsm_busy.is_empty() {
                    let f = self.ace.as_ref().unwrap().alloc.assign(ticket, g);
                    self.gates[key].fsm_busy[f] -= 1;
                }
                self.try_grant(key);
            }
        }
        let inst = self.instances[i as usize].as_ref().unwrap();
        if inst.remaining == 0 {
            self.finish_instance(i);
        }
    }

    fn finish_instance(&mut self, i: u32) {
        let inst = self.instances[i as usize].take().unwrap();
        self.free.push(i);
        self.inflight -= 1;
        let c = &mut self.colls[inst.coll as usize];
        c.done += 1;
        if c.done == c.record.chunks {
            c.record.finished = Some(self.now);
            let id = c.record.id;
            self.push(self.now, EvKind::CollDone(id));
        }
        self.admit();
    }

    /// Runs until no events remain.
    pub fn run<D: Driver + ?Sized>(&mut self, driver: &mut D) -> Result<EngineReport, Deadlock> {
        driver.start(self);
        self.drain();
        while let Some(Reverse(ev)) = self.heap.pop() {
            self.now = ev.time;
            self.events += 1;
            match ev.kind {
                EvKind::Stage { inst, step, stage } => self.run_stage(inst, step, stage),
                EvKind::SendDone { inst, step, link } => {
                    self.complete(inst, step);
                    self.link_free(link);
                }
                EvKind::Arrive { inst, msg } => {
                    let x = self.instances[inst as usize].as_mut().unwrap();
                    self.delivered += x.tpl.msg_payload[msg as usize];
                    let r = x.tpl.recv_of[msg as usize];
                    if r != u32::MAX {
                        x.pending[r as usize] -= 1;
                        if x.pending[r as usize] == 0 {
                            self.work.push(Work::Ready(inst, r));
                        }
                    }
                }
                EvKind::Timer(token) => driver.timer(self, token),
                EvKind::CollDone(id) => driver.collective_done(self, id),
            }
            self.drain();
        }
        let stuck = self.blocked_steps();
        if !stuck.is_empty() {
            return Err(Deadlock {
                cycle: self.now,
                blocked: stuck,
            });
        }
        Ok(self.report())
    }

    fn blocked_steps(&self) -> Vec<String> {
        let mut out = Vec::new();
        for inst in self.instances.iter().flatten() {
            let t = &inst.tpl;
            for s in 0..t.node.len() {
                if inst.pending[s] > 0 {
                    out.push(format!(
                        "collective {} ({}) chunk {} step {} on node {}: {:?} waiting on {} dependencies",
                        inst.coll, t.kind, inst.chunk, s, t.node[s], t.action[s], inst.pending[s]
                    ));
                }
            }
            for (key, steps) in &inst.parked {
                for s in steps {
                    out.push(format!(
                        "collective {} chunk {} step {} on node {}: waiting for SRAM partition {}",
                        inst.coll,
                        inst.chunk,
                        s,
                        t.node[*s as usize],
                        *key as usize % self.gates_n
                    ));
                }
            }
        }
        for c in &self.colls {
            if c.record.finished.is_none() && c.admitted < c.record.chunks && out.is_empty() {
                out.push(format!("collective {} has {} chunks never admitted", c.record.id, c.record.chunks - c.admitted));
            }
        }
        out
    }

    fn report(&self) -> EngineReport {
        let mut traffic = TrafficReport::default();
        let mut links = 0;
        for (ch, k) in self.channels.iter().zip(&self.kinds) {
            match k {
                ChanKind::Link => {
                    traffic.network_bytes_sent += ch.bytes;
                    links += 1;
                }
                ChanKind::MemRd => traffic.mem_bytes_read += ch.bytes,
                ChanKind::MemWr => traffic.mem_bytes_written += ch.bytes,
                ChanKind::AfiTx | ChanKind::AfiRx => traffic.bus_npu_afi_bytes += ch.bytes,
                ChanKind::Alu | ChanKind::SramRd | ChanKind::SramWr => {}
            }
        }
        traffic.bus_npu_mem_bytes = traffic.mem_bytes_read + traffic.mem_bytes_written;
        if self.cfg.datapath == Datapath::Ace {
            traffic.bus_npu_afi_bytes = traffic.bus_npu_mem_bytes;
        }
        traffic.sram_bytes_peak = self.sram_peak;
        EngineReport {
            finish: self.now,
            traffic,
            delivered_payload_bytes: self.delivered,
            link_count: links,
            window_cycles: self.cfg.window_cycles,
            link_busy_ticks: self.busy.clone(),
            collectives: self.colls.iter().map(|c| c.record.clone()).collect(),
            reduced_bytes: self.reduced,
            packets: self.packets,
            events: self.events,
        }
    }
}

/// Runs one collective on an otherwise idle system.
pub fn run_single(
    cfg: &EngineConfig,
    topo: &Topology,
    kind: CollectiveKind,
    payload_bytes: u64,
) -> Result<EngineReport, crate::Error> {
    let mut eng = Engine::new(cfg.clone(), topo.clone())?;
    Ok(eng.run(&mut SingleCollective { kind, payload_bytes })?)
}

/// Default chunk size in KiB, for config defaults.
pub const DEFAULT_CHUNK_KIB: u64 = ChunkPlan::DEFAULT_CHUNK_BYTES / KIB;

/// Link class of a kind, handy for reports.
pub fn link_gbps(topo: &Topology, kind: LinkKind) -> Option<f64> {
    topo.links().iter().find(|l| l.kind() == kind).map(|l| l.class.gbps)
}
