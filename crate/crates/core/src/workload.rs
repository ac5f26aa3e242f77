//! Layer traces and the two-iteration training loop.
//!
//! All nodes run the same data-parallel program, so one compute timeline
//! stands for every node. Collectives go through the engine; the loop only
//! blocks where a layer needs a result that has not arrived yet.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collectives::CollectiveKind;
use crate::endpoint::{compute_slowdown, Datapath, ResourceBudget, TrafficReport};
use crate::engine::{CollId, CollectiveRecord, Driver, Engine, EngineConfig};
use crate::error::{ConfigError, Error, TraceError};
use crate::topology::Topology;
use crate::units::Cycles;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parallelism {
    DataParallel,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommTrigger {
    AfterWeightGrad,
    /// Embedding exchange: an all-to-all after the lookup in the forward
    /// pass and another one for the gradients in back-propagation.
    FwdEmbedding,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub model: String,
    pub parallelism: Parallelism,
    pub minibatch: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub name: String,
    pub fwd_cycles: Cycles,
    pub ig_cycles: Cycles,
    pub wg_cycles: Cycles,
    pub comm_kind: CollectiveKind,
    pub comm_bytes: u64,
    pub trigger: CommTrigger,
}

impl Layer {
    fn is_embedding(&self) -> bool {
        self.trigger == CommTrigger::FwdEmbedding
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub header: TraceHeader,
    pub layers: Vec<Layer>,
}

impl Workload {
    pub fn parse(text: &str) -> Result<Workload, TraceError> {
        Workload::read(text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Workload, TraceError> {
        let f = std::fs::File::open(path).map_err(|source| TraceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Workload::read(std::io::BufReader::new(f))
    }

    fn read(r: impl BufRead) -> Result<Workload, TraceError> {
        let mut header = None;
        let mut layers = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| TraceError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |e: serde_json::Error| TraceError::Parse {
                line: i + 1,
                reason: e.to_string(),
            };
            if header.is_none() {
                header = Some(serde_json::from_str::<TraceHeader>(&line).map_err(bad)?);
            } else {
                let layer: Layer = serde_json::from_str(&line).map_err(bad)?;
                if layer.is_embedding() && layer.comm_kind != CollectiveKind::AllToAll {
                    return Err(TraceError::Parse {
                        line: i + 1,
                        reason: "embedding layers exchange with all_to_all".into(),
                    });
                }
                layers.push(layer);
            }
        }
        let header = header.ok_or(TraceError::Parse {
            line: 1,
            reason: "missing header line".into(),
        })?;
        Ok(Workload { header, layers })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for l in &self.layers {
            out.push_str(&serde_json::to_string(l).expect("layer serializes"));
            out.push('\n');
        }
        out
    }

    pub fn total_compute(&self) -> Cycles {
        self.layers.iter().map(|l| l.fwd_cycles + l.ig_cycles + l.wg_cycles).sum()
    }

    pub fn comm_bytes(&self, kind: CollectiveKind) -> u64 {
        self.layers.iter().filter(|l| l.comm_kind == kind).map(|l| l.comm_bytes).sum()
    }

    fn embedding(&self) -> Option<&Layer> {
        self.layers.iter().find(|l| l.is_embedding())
    }

    /// Looks up one of the bundled traces by name.
    pub fn bundled(name: &str) -> Option<Workload> {
        let text = match name {
            "resnet50-like" => RESNET50_LIKE,
            "gnmt-like" => GNMT_LIKE,
            "dlrm-like" => DLRM_LIKE,
            _ => return None,
        };
        Some(Workload::parse(text).expect("bundled traces parse"))
    }
}

pub const BUNDLED: [&str; 3] = ["resnet50-like", "gnmt-like", "dlrm-like"];

const RESNET50_LIKE: &str = include_str!("../traces/resnet50-like.jsonl");
const GNMT_LIKE: &str = include_str!("../traces/gnmt-like.jsonl");
const DLRM_LIKE: &str = include_str!("../traces/dlrm-like.jsonl");

/// Generators behind the bundled traces.
///
/// Layer shapes follow the named models; gradients are FP16. Compute is
/// expressed at a fixed rate of multiply-accumulate work per cycle, then
/// scaled per model so one iteration's gradient exchange at full fabric
/// speed is a sizeable share of compute (the regime where overlap matters).
pub mod generate {
    use super::*;

    const FLOPS_PER_CYCLE: f64 = 48_000.0;

    fn layer(name: String, fwd: f64, ig: f64, wg: f64, kind: CollectiveKind, bytes: u64, t: CommTrigger) -> Layer {
        Layer {
            name,
            fwd_cycles: fwd.round() as Cycles,
            ig_cycles: ig.round() as Cycles,
            wg_cycles: wg.round() as Cycles,
            comm_kind: kind,
            comm_bytes: bytes,
            trigger: t,
        }
    }

    fn jitter(rng: &mut ChaCha8Rng) -> f64 {
        rng.gen_range(0.9..1.1)
    }

    /// Bottleneck residual network; projection shortcuts are folded into
    /// the block they start, leaving 50 weight layers.
    pub fn resnet50_like(seed: u64) -> Workload {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = 32.0;
        let scale = 1.0 / 13.0;
        let mut convs: Vec<(String, f64, f64)> = vec![("conv1".into(), 7.0 * 7.0 * 3.0 * 64.0, 112.0)];
        let mut cin = 64.0;
        for (stage, &(blocks, mid, spatial)) in [(3, 64.0, 56.0), (4, 128.0, 28.0), (6, 256.0, 14.0), (3, 512.0, 7.0)]
            .iter()
            .enumerate()
        {
            for b in 0..blocks {
                let out = 4.0 * mid;
                let p = format!("stage{}.block{}", stage + 1, b);
                convs.push((format!("{p}.a"), cin * mid, spatial));
                convs.push((format!("{p}.b"), 9.0 * mid * mid, spatial));
                // the projection shortcut rides with the last conv of the first block
                let extra = if b == 0 { cin * out } else { 0.0 };
                convs.push((format!("{p}.c"), mid * out + extra, spatial));
                cin = out;
            }
        }
        convs.push(("fc".into(), 2048.0 * 1000.0, 1.0));
        let layers = convs
            .into_iter()
            .map(|(name, params, spatial)| {
                let flops = 2.0 * params * spatial * spatial * batch * scale / FLOPS_PER_CYCLE;
                let j = jitter(&mut rng);
                layer(
                    name,
                    flops * j,
                    flops * j,
                    flops * j,
                    CollectiveKind::AllReduce,
                    (params as u64) * 2,
                    CommTrigger::AfterWeightGrad,
                )
            })
            .collect();
        Workload {
            header: TraceHeader {
                model: "resnet50-like".into(),
                parallelism: Parallelism::DataParallel,
                minibatch: 32,
            },
            layers,
        }
    }

    /// Stacked recurrent encoder/decoder with attention at a 512 hidden
    /// size; few layers, each with a large gradient.
    pub fn gnmt_like(seed: u64) -> Workload {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = 512.0;
        let tokens = 128.0 * 50.0;
        let scale = 1.0 / 18.0;
        let mut defs: Vec<(String, f64)> = vec![("embed.src".into(), 3.0 * hidden * hidden)];
        for i in 0..4 {
            defs.push((format!("encoder.lstm{i}"), 8.0 * hidden * hidden));
        }
        defs.push(("attention".into(), 3.0 * hidden * hidden));
        for i in 0..4 {
            defs.push((format!("decoder.lstm{i}"), 8.0 * hidden * hidden));
        }
        defs.push(("embed.tgt".into(), 3.0 * hidden * hidden));
        defs.push(("softmax".into(), 3.0 * hidden * hidden));
        let layers = defs
            .into_iter()
            .map(|(name, params)| {
                let flops = 2.0 * params * tokens * scale / FLOPS_PER_CYCLE;
                let j = jitter(&mut rng);
                layer(
                    name,
                    flops * j,
                    flops * j,
                    flops * j,
                    CollectiveKind::AllReduce,
                    (params as u64) * 2,
                    CommTrigger::AfterWeightGrad,
                )
            })
            .collect();
        Workload {
            header: TraceHeader {
                model: "gnmt-like".into(),
                parallelism: Parallelism::DataParallel,
                minibatch: 128,
            },
            layers,
        }
    }

    /// Bottom MLP, model-parallel embedding tables, wide top MLP.
    pub fn dlrm_like(seed: u64) -> Workload {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = 512.0;
        let scale = 1.0 / 2.0;
        let mlp = |name: String, fan_in: f64, fan_out: f64, rng: &mut ChaCha8Rng| {
            let params = fan_in * fan_out;
            let flops = 2.0 * params * batch * scale / FLOPS_PER_CYCLE;
            let j = jitter(rng);
            layer(
                name,
                flops * j,
                flops * j,
                flops * j,
                CollectiveKind::AllReduce,
                (params as u64) * 2,
                CommTrigger::AfterWeightGrad,
            )
        };
        let mut layers = Vec::new();
        for (i, (a, b)) in [(13.0, 512.0), (512.0, 256.0), (256.0, 128.0)].into_iter().enumerate() {
            layers.push(mlp(format!("bottom_mlp{i}"), a, b, &mut rng));
        }
        // 26 tables of 128-wide FP16 vectors for the local batch
        let exchange = 26 * 128 * 2 * 512;
        let lookup = 100_000.0 * jitter(&mut rng);
        layers.push(layer(
            "embedding".into(),
            lookup,
            0.0,
            lookup * 1.5,
            CollectiveKind::AllToAll,
            exchange,
            CommTrigger::FwdEmbedding,
        ));
        for (i, (a, b)) in [(479.0, 2048.0), (2048.0, 2048.0), (2048.0, 1024.0), (1024.0, 256.0), (256.0, 1.0)]
            .into_iter()
            .enumerate()
        {
            layers.push(mlp(format!("top_mlp{i}"), a, b, &mut rng));
        }
        Workload {
            header: TraceHeader {
                model: "dlrm-like".into(),
                parallelism: Parallelism::Hybrid,
                minibatch: 512,
            },
            layers,
        }
    }

    pub fn by_name(name: &str) -> Option<Workload> {
        match name {
            "resnet50-like" => Some(resnet50_like(50)),
            "gnmt-like" => Some(gnmt_like(8)),
            "dlrm-like" => Some(dlrm_like(26)),
            _ => None,
        }
    }
}

/// The five systems compared in training runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    BaselineNoOverlap,
    BaselineCommOpt,
    BaselineCompOpt,
    Ace,
    Ideal,
}

impl SystemKind {
    pub const ALL: [SystemKind; 5] = [
        SystemKind::BaselineNoOverlap,
        SystemKind::BaselineCommOpt,
        SystemKind::BaselineCompOpt,
        SystemKind::Ace,
        SystemKind::Ideal,
    ];

    pub const BASELINES: [SystemKind; 3] = [
        SystemKind::BaselineNoOverlap,
        SystemKind::BaselineCommOpt,
        SystemKind::BaselineCompOpt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::BaselineNoOverlap => "baseline_no_overlap",
            SystemKind::BaselineCommOpt => "baseline_comm_opt",
            SystemKind::BaselineCompOpt => "baseline_comp_opt",
            SystemKind::Ace => "ace",
            SystemKind::Ideal => "ideal",
        }
    }

    /// Endpoint and resource split for this system.
    pub fn preset(self) -> SystemConfig {
        let full = ResourceBudget::default();
        let (datapath, mem, sms, overlap) = match self {
            SystemKind::BaselineNoOverlap => (Datapath::Baseline, full.mem_bw_total_gbps, full.sm_total, false),
            SystemKind::BaselineCommOpt => (Datapath::Baseline, 450.0, 6, true),
            SystemKind::BaselineCompOpt => (Datapath::Baseline, 128.0, 2, true),
            SystemKind::Ace => (Datapath::Ace, 128.0, 0, true),
            SystemKind::Ideal => (Datapath::Ideal, 0.0, 0, true),
        };
        SystemConfig {
            kind: self,
            datapath,
            budget: ResourceBudget {
                mem_bw_comm_gbps: mem,
                sm_comm: sms,
                ..full
            },
            overlap,
        }
    }
}

impl std::fmt::Display for SystemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SystemKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SystemKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ConfigError::invalid("system_config", format!("unknown system `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemConfig {
    pub kind: SystemKind,
    pub datapath: Datapath,
    pub budget: ResourceBudget,
    /// Whether collectives run concurrently with compute.
    pub overlap: bool,
}

impl SystemConfig {
    /// Compute slowdown from the resources given to communication. Systems
    /// that never run both at once, and the ideal system, compute at full speed.
    pub fn compute_factor(&self) -> Result<f64, ConfigError> {
        if !self.overlap || self.datapath == Datapath::Ideal {
            return Ok(1.0);
        }
        compute_slowdown(&self.budget)
    }

    pub fn engine_config(&self, base: &EngineConfig) -> EngineConfig {
        EngineConfig {
            datapath: self.datapath,
            budget: self.budget,
            ..base.clone()
        }
    }
}

/// Resources set aside for embedding work in the optimized DLRM loop.
pub const EMBEDDING_SMS: u32 = 1;
pub const EMBEDDING_MEM_GBPS: f64 = 80.0;

#[derive(Debug, Clone, Serialize)]
pub struct RunMetrics {
    pub system: SystemKind,
    pub model: String,
    pub dims: String,
    pub iteration_cycles: Cycles,
    pub total_compute_cycles: Cycles,
    pub exposed_comm_cycles: Cycles,
    /// Cycle at which each iteration's work finished on the compute timeline.
    pub iteration_ends: Vec<Cycles>,
    /// Cycles during which at least one collective was in flight.
    pub comm_busy_cycles: Cycles,
    pub effective_network_gbps: f64,
    pub window_cycles: Cycles,
    pub utilization: Vec<f64>,
    pub traffic: TrafficReport,
    pub collectives: Vec<CollectiveRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Slot {
    AllReduce(u32, usize),
    FwdExchange(u32),
    BwdExchange(u32),
    Fused(u32),
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Compute(Cycles),
    Issue(Slot, CollectiveKind, u64),
    Wait(Slot),
    IterationEnd,
    WaitAll,
}

#[derive(Default)]
struct Stream {
    ops: Vec<Op>,
    pc: usize,
    blocked_since: Option<Cycles>,
    computing: bool,
    finished: Option<Cycles>,
}

/// Drives one training run through the engine.
struct TrainingLoop {
    main: Stream,
    side: Stream,
    slots: BTreeMap<Slot, Option<bool>>,
    slot_of: Vec<Option<Slot>>,
    compute: Cycles,
    exposed: Cycles,
    iteration_ends: Vec<Cycles>,
}

const MAIN: u64 = 0;
const SIDE: u64 = 1;

pub const ITERATIONS: u32 = 2;

fn scaled(c: Cycles, f: f64) -> Cycles {
    (c as f64 * f).round() as Cycles
}

fn main_program(w: &Workload, f: f64, overlap: bool, optimized: bool) -> Vec<Op> {
    let mut ops = Vec::new();
    let layers = &w.layers;
    for it in 0..ITERATIONS {
        for (i, l) in layers.iter().enumerate() {
            if overlap && it > 0 && !l.is_embedding() && l.comm_bytes > 0 {
                ops.push(Op::Wait(Slot::AllReduce(it - 1, i)));
            }
            if l.is_embedding() {
                if !optimized {
                    ops.push(Op::Compute(scaled(l.fwd_cycles, f)));
                    ops.push(Op::Issue(Slot::FwdExchange(it), CollectiveKind::AllToAll, l.comm_bytes));
                }
                ops.push(Op::Wait(Slot::FwdExchange(it)));
            } else {
                ops.push(Op::Compute(scaled(l.fwd_cycles, f)));
            }
        }
        let mut fused = 0;
        for (i, l) in layers.iter().enumerate().rev() {
            if l.is_embedding() {
                ops.push(Op::Compute(scaled(l.ig_cycles, f)));
                if overlap {
                    ops.push(Op::Issue(Slot::BwdExchange(it), CollectiveKind::AllToAll, l.comm_bytes));
                }
                continue;
            }
            ops.push(Op::Compute(scaled(l.wg_cycles, f)));
            if l.comm_bytes > 0 {
                if overlap {
                    ops.push(Op::Issue(Slot::AllReduce(it, i), l.comm_kind, l.comm_bytes));
                } else {
                    fused += l.comm_bytes;
                }
            }
            ops.push(Op::Compute(scaled(l.ig_cycles, f)));
        }
        if !overlap {
            // one kernel at the end of back-propagation carries every exchange
            ops.push(Op::Issue(Slot::Fused(it), CollectiveKind::AllReduce, fused));
            if let Some(e) = w.embedding() {
                ops.push(Op::Issue(Slot::BwdExchange(it), CollectiveKind::AllToAll, e.comm_bytes));
            }
            ops.push(Op::Wait(Slot::Fused(it)));
        }
        if let Some(e) = w.embedding() {
            if !optimized || !overlap {
                ops.push(Op::Wait(Slot::BwdExchange(it)));
            }
            if !optimized {
                ops.push(Op::Compute(scaled(e.wg_cycles, f)));
            }
        }
        ops.push(Op::IterationEnd);
    }
    ops.push(Op::WaitAll);
    ops
}

/// Embedding lookups and updates moved off the main timeline.
fn side_program(w: &Workload) -> Vec<Op> {
    let Some(e) = w.embedding() else { return Vec::new() };
    let mut ops = Vec::new();
    for it in 0..ITERATIONS {
        ops.push(Op::Compute(e.fwd_cycles));
        ops.push(Op::Issue(Slot::FwdExchange(it), CollectiveKind::AllToAll, e.comm_bytes));
    }
    for it in 0..ITERATIONS {
        ops.push(Op::Wait(Slot::BwdExchange(it)));
        ops.push(Op::Compute(e.wg_cycles));
    }
    ops
}

impl TrainingLoop {
    fn new(main: Vec<Op>, side: Vec<Op>) -> TrainingLoop {
        TrainingLoop {
            main: Stream {
                ops: main,
                ..Default::default()
            },
            side: Stream {
                ops: side,
                ..Default::default()
            },
            slots: BTreeMap::new(),
            slot_of: Vec::new(),
            compute: 0,
            exposed: 0,
            iteration_ends: Vec::new(),
        }
    }

    fn done(&self, s: Slot) -> bool {
        self.slots.get(&s) == Some(&Some(true))
    }

    fn advance(&mut self, eng: &mut Engine, which: u64) {
        let now = eng.now();
        loop {
            let s = if which == MAIN { &mut self.main } else { &mut self.side };
            if s.finished.is_some() || s.computing {
                return;
            }
            let Some(&op) = s.ops.get(s.pc) else {
                s.finished = Some(now);
                return;
            };
            let ready = match op {
                Op::Wait(slot) => self.done(slot),
                Op::WaitAll => self.slots.values().all(|v| *v == Some(true)),
                _ => true,
            };
            let s = if which == MAIN { &mut self.main } else { &mut self.side };
            if !ready {
                s.blocked_since.get_or_insert(now);
                return;
            }
            if let Some(t) = s.blocked_since.take() {
                if which == MAIN {
                    self.exposed += now - t;
                }
            }
            let s = if which == MAIN { &mut self.main } else { &mut self.side };
            s.pc += 1;
            match op {
                Op::Compute(0) | Op::Wait(_) | Op::WaitAll => {}
                Op::Compute(c) => {
                    if which == MAIN {
                        self.compute += c;
                    }
                    s.computing = true;
                    eng.set_timer(now + c, which);
                    return;
                }
                Op::Issue(slot, kind, bytes) => {
                    self.slots.insert(slot, Some(false));
                    let id = eng.issue(kind, bytes) as usize;
                    if self.slot_of.len() <= id {
                        self.slot_of.resize(id + 1, None);
                    }
                    self.slot_of[id] = Some(slot);
                }
                Op::IterationEnd => {
                    if which == MAIN {
                        self.iteration_ends.push(now);
                    }
                }
            }
        }
    }
}

impl Driver for TrainingLoop {
    fn start(&mut self, eng: &mut Engine) {
        self.advance(eng, MAIN);
        self.advance(eng, SIDE);
    }

    fn timer(&mut self, eng: &mut Engine, token: u64) {
        if token == MAIN {
            self.main.computing = false;
        } else {
            self.side.computing = false;
        }
        self.advance(eng, token);
    }

    fn collective_done(&mut self, eng: &mut Engine, id: CollId) {
        if let Some(Some(slot)) = self.slot_of.get(id as usize) {
            self.slots.insert(*slot, Some(true));
        }
        self.advance(eng, MAIN);
        self.advance(eng, SIDE);
    }
}

fn union_length(records: &[CollectiveRecord]) -> Cycles {
    let mut spans: Vec<(Cycles, Cycles)> = records
        .iter()
        .filter_map(|r| r.finished.map(|f| (r.issued, f)))
        .filter(|(a, b)| b > a)
        .collect();
    spans.sort_unstable();
    let mut total = 0;
    let mut cur: Option<(Cycles, Cycles)> = None;
    for (a, b) in spans {
        cur = match cur {
            Some((s, e)) if a <= e => Some((s, e.max(b))),
            Some((s, e)) => {
                total += e - s;
                Some((a, b))
            }
            None => Some((a, b)),
        };
    }
    if let Some((s, e)) = cur {
        total += e - s;
    }
    total
}

fn run_loop(
    w: &Workload,
    sys: &SystemConfig,
    topo: &Topology,
    base: &EngineConfig,
    optimized: bool,
) -> Result<RunMetrics, Error> {
    let optimized = optimized && w.embedding().is_some_and(|e| e.fwd_cycles + e.wg_cycles > 0 || e.comm_bytes > 0);
    let f = if optimized {
        // with comm overlap the embedding share comes on top of the comm share
        let mut b = if sys.overlap && sys.datapath != Datapath::Ideal {
            sys.budget
        } else {
            ResourceBudget {
                mem_bw_comm_gbps: 0.0,
                sm_comm: 0,
                ..sys.budget
            }
        };
        b.sm_comm += EMBEDDING_SMS;
        b.mem_bw_comm_gbps += EMBEDDING_MEM_GBPS;
        compute_slowdown(&b)?
    } else {
        sys.compute_factor()?
    };
    let mut eng = Engine::new(sys.engine_config(base), topo.clone())?;
    let main = main_program(w, f, sys.overlap, optimized);
    let side = if optimized { side_program(w) } else { Vec::new() };
    let mut driver = TrainingLoop::new(main, side);
    let report = eng.run(&mut driver)?;
    let finish = driver.main.finished.unwrap_or(report.finish);
    let nodes = topo.node_count();
    Ok(RunMetrics {
        system: sys.kind,
        model: w.header.model.clone(),
        dims: topo.dims().to_string(),
        iteration_cycles: finish,
        total_compute_cycles: driver.compute,
        exposed_comm_cycles: driver.exposed,
        iteration_ends: driver.iteration_ends,
        comm_busy_cycles: union_length(&report.collectives),
        effective_network_gbps: report.effective_gbps(nodes),
        window_cycles: report.window_cycles,
        utilization: report.utilization(),
        traffic: report.traffic,
        collectives: report.collectives,
    })
}

/// Two training iterations of `w` on `sys`.
pub fn run_training(
    w: &Workload,
    sys: &SystemConfig,
    topo: &Topology,
    base: &EngineConfig,
) -> Result<RunMetrics, Error> {
    run_loop(w, sys, topo, base, false)
}

/// Like [`run_training`], but embedding lookups and updates run on their own
/// SM and memory share, off the critical path, and each forward exchange is
/// issued as soon as its lookup ends.
pub fn run_dlrm_optimized(
    w: &Workload,
    sys: &SystemConfig,
    topo: &Topology,
    base: &EngineConfig,
) -> Result<RunMetrics, Error> {
    run_loop(w, sys, topo, base, true)
}

/// Order in which pending collectives get served: newest first.
pub fn lifo_schedule(pending: &[CollId]) -> Vec<CollId> {
    let mut q = crate::engine::LifoQueue::default();
    for &c in pending {
        q.push(c);
    }
    let mut out = Vec::with_capacity(pending.len());
    while let Some(c) = q.peek() {
        out.push(c);
        q.retire(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{Dims, LinkParams};

    fn torus(d: &str) -> Topology {
        Topology::build_torus(d.parse::<Dims>().unwrap(), &LinkParams::default()).unwrap()
    }

    fn tiny(comm: u64) -> Workload {
        let l = |name: &str| Layer {
            name: name.into(),
            fwd_cycles: 1000,
            ig_cycles: 2000,
            wg_cycles: 2000,
            comm_kind: CollectiveKind::AllReduce,
            comm_bytes: comm,
            trigger: CommTrigger::AfterWeightGrad,
        };
        Workload {
            header: TraceHeader {
                model: "tiny".into(),
                parallelism: Parallelism::DataParallel,
                minibatch: 1,
            },
            layers: vec![l("a"), l("b"), l("c")],
        }
    }

    /// `cargo test -p collfab -- --ignored regenerate` rewrites traces/.
    #[test]
    #[ignore]
    fn regenerate_bundled_traces() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("traces");
        std::fs::create_dir_all(&dir).unwrap();
        for name in BUNDLED {
            let w = generate::by_name(name).unwrap();
            std::fs::write(dir.join(format!("{name}.jsonl")), w.to_jsonl()).unwrap();
        }
    }

    #[test]
    fn bundled_traces_match_generators() {
        for name in BUNDLED {
            let bundled = Workload::bundled(name).unwrap();
            assert_eq!(bundled, generate::by_name(name).unwrap(), "{name}: regenerate traces/");
        }
    }

    #[test]
    fn dlrm_has_one_embedding_exchange_before_top_mlp() {
        let w = Workload::bundled("dlrm-like").unwrap();
        let emb: Vec<usize> = (0..w.layers.len()).filter(|&i| w.layers[i].is_embedding()).collect();
        assert_eq!(emb.len(), 1);
        assert!(w.layers[emb[0] + 1].name.starts_with("top_mlp"));
        assert_eq!(w.header.parallelism, Parallelism::Hybrid);
        // one forward and one backward exchange per iteration
        let prog = main_program(&w, 1.0, true, false);
        let a2a: Vec<Slot> = prog
            .iter()
            .filter_map(|op| match op {
                Op::Issue(s, CollectiveKind::AllToAll, _) => Some(*s),
                _ => None,
            })
            .collect();
        assert_eq!(a2a, vec![Slot::FwdExchange(0), Slot::BwdExchange(0), Slot::FwdExchange(1), Slot::BwdExchange(1)]);
    }

    #[test]
    fn resnet_is_all_reduce_only() {
        let w = Workload::bundled("resnet50-like").unwrap();
        assert_eq!(w.layers.len(), 50);
        assert!(w.layers.iter().all(|l| l.comm_kind == CollectiveKind::AllReduce));
    }

    #[test]
    fn trace_round_trip_and_line_numbers() {
        let w = tiny(4096);
        assert_eq!(Workload::parse(&w.to_jsonl()).unwrap(), w);
        let mut text = w.to_jsonl();
        text.push_str("{\"name\":\"x\",\"fwd_cycles\":-1}\n");
        match Workload::parse(&text).unwrap_err() {
            TraceError::Parse { line, .. } => assert_eq!(line, 5),
            e => panic!("{e}"),
        }
        assert!(Workload::parse("").is_err());
    }

    #[test]
    fn empty_trace_is_zero_cycles() {
        let mut w = tiny(0);
        w.layers.clear();
        let m = run_training(&w, &SystemKind::Ace.preset(), &torus("2x2x2"), &EngineConfig::default()).unwrap();
        assert_eq!(m.iteration_cycles, 0);
    }

    #[test]
    fn no_comm_means_no_exposure() {
        let w = tiny(0);
        for k in SystemKind::ALL {
            let sys = k.preset();
            let m = run_training(&w, &sys, &torus("2x2x2"), &EngineConfig::default()).unwrap();
            assert_eq!(m.exposed_comm_cycles, 0, "{k}");
            assert_eq!(m.iteration_cycles, m.total_compute_cycles);
            let f = sys.compute_factor().unwrap();
            let expect: Cycles = (0..2).map(|_| w.layers.iter().map(|l| scaled(l.fwd_cycles, f) + scaled(l.ig_cycles, f) + scaled(l.wg_cycles, f)).sum::<Cycles>()).sum();
            assert_eq!(m.total_compute_cycles, expect);
        }
    }

    #[test]
    fn accounting_identity_and_no_overlap_exposure() {
        let w = tiny(256 * 1024);
        let topo = torus("2x2x2");
        for k in SystemKind::ALL {
            let m = run_training(&w, &k.preset(), &topo, &EngineConfig::default()).unwrap();
            assert_eq!(m.iteration_cycles, m.total_compute_cycles + m.exposed_comm_cycles, "{k}");
            assert!(m.exposed_comm_cycles <= m.comm_busy_cycles, "{k}");
        }
        let m = run_training(&w, &SystemKind::BaselineNoOverlap.preset(), &topo, &EngineConfig::default()).unwrap();
        let fused: Cycles = m.collectives.iter().map(|c| c.latency().unwrap()).sum();
        assert_eq!(m.collectives.len(), 2);
        assert_eq!(m.exposed_comm_cycles, fused);
    }

    #[test]
    fn zero_embedding_cost_leaves_loop_unchanged() {
        let mut w = Workload::bundled("dlrm-like").unwrap();
        for l in &mut w.layers {
            if l.is_embedding() {
                l.fwd_cycles = 0;
                l.wg_cycles = 0;
                l.comm_bytes = 0;
            }
        }
        let topo = torus("2x2x2");
        let sys = SystemKind::Ace.preset();
        let a = run_training(&w, &sys, &topo, &EngineConfig::default()).unwrap();
        let b = run_dlrm_optimized(&w, &sys, &topo, &EngineConfig::default()).unwrap();
        assert_eq!(a.iteration_cycles, b.iteration_cycles);
    }

    #[test]
    fn lifo_order() {
        assert_eq!(lifo_schedule(&[0, 1, 2]), vec![2, 1, 0]);
        assert_eq!(lifo_schedule(&[7]), vec![7]);
    }

    #[test]
    fn presets_follow_the_table() {
        let c = SystemKind::BaselineCommOpt.preset();
        assert_eq!((c.budget.mem_bw_comm_gbps, c.budget.sm_comm), (450.0, 6));
        let c = SystemKind::BaselineCompOpt.preset();
        assert_eq!((c.budget.mem_bw_comm_gbps, c.budget.sm_comm), (128.0, 2));
        let c = SystemKind::Ace.preset();
        assert_eq!((c.budget.mem_bw_comm_gbps, c.budget.sm_comm, c.datapath), (128.0, 0, Datapath::Ace));
        assert_eq!(SystemKind::BaselineNoOverlap.preset().compute_factor().unwrap(), 1.0);
        assert_eq!("ace".parse::<SystemKind>().unwrap(), SystemKind::Ace);
    }
}
