//! Per-chunk step schedules for ring, hierarchical and direct collectives,
//! plus a functional executor used as the correctness oracle.
//!
//! A schedule describes one chunk. Offsets are byte offsets into the
//! (padded) chunk buffer that every participating node holds. Ring
//! reduce-scatter leaves ring position `i` owning segment `(i + 1) mod k`.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::ScheduleError;
use crate::topology::{Dim, Dir, Dims, NodeId, Topology};
use crate::units::KIB;

pub type StepId = u32;
pub type MsgId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    ReduceScatter,
    AllGather,
    AllReduce,
    AllToAll,
}

impl CollectiveKind {
    /// Whether the collective sums data from different nodes.
    pub fn reduces(self) -> bool {
        matches!(self, CollectiveKind::ReduceScatter | CollectiveKind::AllReduce)
    }
}

impl std::fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CollectiveKind::ReduceScatter => "reduce_scatter",
            CollectiveKind::AllGather => "all_gather",
            CollectiveKind::AllReduce => "all_reduce",
            CollectiveKind::AllToAll => "all_to_all",
        };
        f.write_str(s)
    }
}

/// Sizing of one chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub chunk_id: u32,
    pub payload_bytes: u64,
    /// Upper bound on the size of a single message.
    pub message_bytes: u64,
}

impl ChunkPlan {
    pub const DEFAULT_CHUNK_BYTES: u64 = 64 * KIB;
    pub const DEFAULT_MESSAGE_BYTES: u64 = 8 * KIB;
    pub const DEFAULT_PACKET_BYTES: u64 = 256;

    pub fn new(payload_bytes: u64) -> Self {
        ChunkPlan {
            chunk_id: 0,
            payload_bytes,
            message_bytes: Self::DEFAULT_MESSAGE_BYTES,
        }
    }

    pub fn with_message_bytes(mut self, message_bytes: u64) -> Self {
        assert!(message_bytes > 0, "message size must be positive");
        self.message_bytes = message_bytes;
        self
    }
}

/// Where the bytes of an outgoing message come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataRef {
    /// `bytes` starting at `offset` of the sender's chunk buffer.
    Buffer { offset: u64 },
    /// Whatever arrived in an earlier message (multi-hop relay).
    Relay { msg: MsgId },
}

/// What the receiver does with an incoming message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Delivery {
    Reduce { offset: u64 },
    Store { offset: u64 },
    /// Held for forwarding to the next hop.
    Relay,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Message {
    pub id: MsgId,
    pub src: usize,
    pub dst: usize,
    pub dim: Dim,
    pub dir: Dir,
    pub bytes: u64,
    /// Bytes of this message that are padding beyond the real payload.
    pub padding: u64,
    pub phase: u8,
    pub data: DataRef,
    pub delivery: Delivery,
}

/// How a send obtains its data, which decides the baseline memory cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SendOrigin {
    /// Read from main memory.
    Memory,
    /// Result of a reduction that was just computed; no extra read.
    Reduced,
    /// Data received earlier and now re-read to forward it.
    Forwarded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    LoadFromMemory { bytes: u64 },
    SendMsg { msg: MsgId, dst: usize, origin: SendOrigin },
    RecvMsg { msg: MsgId, src: usize },
    /// Reduce a received message into the local buffer. `persist` marks
    /// results that must be kept (written back) rather than only forwarded.
    ReduceLocal { msg: MsgId, persist: bool },
    StoreFinal { msg: MsgId },
    WriteToMemory { bytes: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Step {
    pub id: StepId,
    pub node: usize,
    pub phase: u8,
    pub action: Action,
    pub deps: Vec<StepId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseKind {
    ReduceScatter,
    AllGather,
    AllReduce,
    AllToAll,
}

/// One phase of a (possibly hierarchical) collective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseInfo {
    pub kind: PhaseKind,
    /// Ring dimension; `None` for direct all-to-all.
    pub dim: Option<Dim>,
    pub ring_len: usize,
    /// Bytes each node brings into the phase.
    pub input_bytes: u64,
    /// Bytes each node holds as the phase result.
    pub output_bytes: u64,
    /// Messages per ring for one execution of the phase.
    pub messages: u64,
    pub message_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollectiveSchedule {
    pub kind: CollectiveKind,
    pub plan: ChunkPlan,
    pub node_count: usize,
    /// Payload rounded up so every phase divides evenly.
    pub padded_bytes: u64,
    pub phases: Vec<PhaseInfo>,
    pub messages: Vec<Message>,
    pub steps: Vec<Step>,
    /// Per node: the buffer range that carries meaningful input.
    pub input: Vec<Range<u64>>,
    /// Per node: the buffer range that carries the result.
    pub result: Vec<Range<u64>>,
}

impl CollectiveSchedule {
    fn empty(kind: CollectiveKind, plan: ChunkPlan, node_count: usize) -> Self {
        CollectiveSchedule {
            kind,
            plan,
            node_count,
            padded_bytes: plan.payload_bytes,
            phases: Vec::new(),
            messages: Vec::new(),
            steps: Vec::new(),
            input: vec![0..plan.payload_bytes; node_count],
            result: vec![0..plan.payload_bytes; node_count],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn padding_bytes(&self) -> u64 {
        self.padded_bytes - self.plan.payload_bytes
    }

    pub fn phase_count(&self) -> usize {
        self.phases.len()
    }

    /// Bytes injected by each node over all its sends (relays included).
    pub fn sent_bytes_per_node(&self) -> Vec<u64> {
        let mut out = vec![0; self.node_count];
        for m in &self.messages {
            out[m.src] += m.bytes;
        }
        out
    }

    /// Same as [`sent_bytes_per_node`](Self::sent_bytes_per_node) with padding excluded.
    pub fn payload_sent_per_node(&self) -> Vec<u64> {
        let mut out = vec![0; self.node_count];
        for m in &self.messages {
            out[m.src] += m.bytes - m.padding;
        }
        out
    }

    pub fn received_bytes_per_node(&self) -> Vec<u64> {
        let mut out = vec![0; self.node_count];
        for m in &self.messages {
            out[m.dst] += m.bytes;
        }
        out
    }

    /// Bytes each node originates (first hop only).
    pub fn originated_bytes_per_node(&self) -> Vec<u64> {
        let mut out = vec![0; self.node_count];
        for m in &self.messages {
            if matches!(m.data, DataRef::Buffer { .. }) {
                out[m.src] += m.bytes;
            }
        }
        out
    }

    /// Number of dependent send rounds on the critical path, counted as the
    /// longest chain of messages where each depends on the previous one.
    pub fn rounds(&self) -> usize {
        let mut depth = vec![0usize; self.steps.len()];
        let mut best = 0;
        for s in &self.steps {
            let d = s.deps.iter().map(|&p| depth[p as usize]).max().unwrap_or(0);
            depth[s.id as usize] = d + usize::from(matches!(s.action, Action::SendMsg { .. }));
            best = best.max(depth[s.id as usize]);
        }
        best
    }

    /// Checks send/recv pairing and acyclicity.
    pub fn validate(&self) -> Result<(), ScheduleError> {
        self.validated_order().map(|_| ())
    }

    fn validated_order(&self) -> Result<Vec<StepId>, ScheduleError> {
        let n = self.steps.len() as u32;
        let mut sends = vec![0u32; self.messages.len()];
        let mut recvs = vec![0u32; self.messages.len()];
        for s in &self.steps {
            for &d in &s.deps {
                if d >= n {
                    return Err(ScheduleError::DanglingDependency { step: s.id, dep: d });
                }
            }
            match s.action {
                Action::SendMsg { msg, .. } => sends[msg as usize] += 1,
                Action::RecvMsg { msg, .. } => recvs[msg as usize] += 1,
                _ => {}
            }
        }
        for (i, (&s, &r)) in sends.iter().zip(&recvs).enumerate() {
            if s != 1 {
                return Err(ScheduleError::UnmatchedRecv { msg: i as u32 });
            }
            if r != 1 {
                return Err(ScheduleError::UnmatchedSend { msg: i as u32 });
            }
        }
        topo_order(&self.steps)
    }

    /// One JSON object per step, newline separated.
    pub fn dump_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("step serializes"));
            out.push('\n');
        }
        out
    }
}

/// Kahn's algorithm over the step graph.
pub fn topo_order(steps: &[Step]) -> Result<Vec<StepId>, ScheduleError> {
    let n = steps.len();
    let mut indeg = vec![0u32; n];
    let mut start = vec![0u32; n + 1];
    for s in steps {
        indeg[s.id as usize] = s.deps.len() as u32;
        for &d in &s.deps {
            start[d as usize + 1] += 1;
        }
    }
    for i in 0..n {
        start[i + 1] += start[i];
    }
    let mut fill = start.clone();
    let mut out = vec![0 as StepId; start[n] as usize];
    for s in steps {
        for &d in &s.deps {
            out[fill[d as usize] as usize] = s.id;
            fill[d as usize] += 1;
        }
    }
    let mut order: Vec<StepId> = (0..n as StepId).filter(|&i| indeg[i as usize] == 0).collect();
    let mut head = 0;
    while head < order.len() {
        let s = order[head] as usize;
        head += 1;
        for &t in &out[start[s] as usize..start[s + 1] as usize] {
            indeg[t as usize] -= 1;
            if indeg[t as usize] == 0 {
                order.push(t);
            }
        }
    }
    if order.len() != n {
        let stuck = indeg.iter().position(|&d| d > 0).unwrap_or(0);
        return Err(ScheduleError::Cycle { step: stuck as u32 });
    }
    Ok(order)
}

/// An ordered ring of nodes in one dimension, traversed in one direction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ring {
    /// Flat node ids in ring order; position `i` sends to position `i + 1`.
    pub members: Vec<usize>,
    pub dim: Dim,
    pub dir: Dir,
}

impl Ring {
    /// The ring through `start` in `dim`, walked in direction `dir`.
    pub fn new(topo: &Topology, start: NodeId, dim: Dim, dir: Dir) -> Ring {
        let dims = topo.dims();
        let len = dims.len(dim);
        let mut members = Vec::with_capacity(len);
        let mut cur = start;
        for _ in 0..len {
            members.push(dims.flat(cur));
            cur = topo.neighbor(cur, dim, dir);
        }
        Ring { members, dim, dir }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

struct Builder {
    node_count: usize,
    payload: u64,
    steps: Vec<Step>,
    messages: Vec<Message>,
    /// Steps of each node not yet ordered before a later local step.
    tail: Vec<Vec<StepId>>,
}

impl Builder {
    fn new(node_count: usize, payload: u64) -> Self {
        Builder {
            node_count,
            payload,
            steps: Vec::new(),
            messages: Vec::new(),
            tail: vec![Vec::new(); node_count],
        }
    }

    fn step(&mut self, node: usize, phase: u8, action: Action, deps: Vec<StepId>) -> StepId {
        let id = self.steps.len() as StepId;
        self.steps.push(Step {
            id,
            node,
            phase,
            action,
            deps,
        });
        id
    }

    fn padding_of(&self, offset: u64, bytes: u64) -> u64 {
        let end = offset + bytes;
        end.saturating_sub(self.payload.max(offset))
    }

    #[allow(clippy::too_many_arguments)]
    fn message(
        &mut self,
        src: usize,
        dst: usize,
        dim: Dim,
        dir: Dir,
        bytes: u64,
        phase: u8,
        data: DataRef,
        delivery: Delivery,
    ) -> MsgId {
        let id = self.messages.len() as MsgId;
        let padding = match data {
            DataRef::Buffer { offset } => self.padding_of(offset, bytes),
            DataRef::Relay { msg } => self.messages[msg as usize].padding,
        };
        self.messages.push(Message {
            id,
            src,
            dst,
            dim,
            dir,
            bytes,
            padding,
            phase,
            data,
            delivery,
        });
        id
    }

    fn take_tail(&mut self, node: usize) -> Vec<StepId> {
        std::mem::take(&mut self.tail[node])
    }

    fn load_all(&mut self, input: &[Range<u64>]) {
        for node in 0..self.node_count {
            let bytes = input[node].end - input[node].start;
            let id = self.step(node, 0, Action::LoadFromMemory { bytes }, Vec::new());
            self.tail[node].push(id);
        }
    }

    fn write_all(&mut self, result: &[Range<u64>], phase: u8) {
        for node in 0..self.node_count {
            let bytes = result[node].end - result[node].start;
            let deps = self.take_tail(node);
            let id = self.step(node, phase, Action::WriteToMemory { bytes }, deps);
            self.tail[node].push(id);
        }
    }

    fn finish(
        self,
        kind: CollectiveKind,
        plan: ChunkPlan,
        padded_bytes: u64,
        phases: Vec<PhaseInfo>,
        input: Vec<Range<u64>>,
        result: Vec<Range<u64>>,
    ) -> CollectiveSchedule {
        CollectiveSchedule {
            kind,
            plan,
            node_count: self.node_count,
            padded_bytes,
            phases,
            messages: self.messages,
            steps: self.steps,
            input,
            result,
        }
    }
}

/// Split `len` into `parts` contiguous pieces whose sizes differ by at most one.
fn piece(len: u64, parts: u64, i: u64) -> Range<u64> {
    (len * i / parts)..(len * (i + 1) / parts)
}

fn groups_for(seg_len: u64, message_bytes: u64) -> u64 {
    seg_len.div_ceil(message_bytes).max(1)
}

/// Segment index owned by ring position `pos` after a reduce-scatter.
pub fn owned_segment(pos: usize, k: usize) -> usize {
    (pos + 1) % k
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum RingOp {
    ReduceScatter,
    AllGather,
    AllReduce,
}

/// Emits one ring collective over `[base, base + len)` on every ring in `rings`.
/// `len` must be divisible by the ring length.
fn emit_ring_phase(
    b: &mut Builder,
    rings: &[Ring],
    op: RingOp,
    base: u64,
    len: u64,
    message_bytes: u64,
    phase: u8,
) -> PhaseInfo {
    let k = rings[0].len();
    debug_assert!(k >= 2 && len % k as u64 == 0);
    let seg_len = len / k as u64;
    let groups = groups_for(seg_len, message_bytes);
    let seg_off = |s: usize| base + s as u64 * seg_len;

    for ring in rings {
        let m = &ring.members;
        for g in 0..groups {
            let pr = piece(seg_len, groups, g);
            let pbytes = pr.end - pr.start;
            if pbytes == 0 {
                continue;
            }
            // Entry dependencies for this group, per ring position.
            let entry: Vec<Vec<StepId>> = m.iter().map(|&n| b.take_tail(n)).collect();
            let mut group_steps: Vec<Vec<StepId>> = vec![Vec::new(); k];
            // Step at each position whose result the next round forwards.
            let mut last: Vec<Option<StepId>> = vec![None; k];

            if matches!(op, RingOp::ReduceScatter | RingOp::AllReduce) {
                for t in 0..k - 1 {
                    let mut next_last = vec![None; k];
                    for i in 0..k {
                        let to = (i + 1) % k;
                        let s = (i + k - t % k) % k;
                        let off = seg_off(s) + pr.start;
                        let msg = b.message(
                            m[i],
                            m[to],
                            ring.dim,
                            ring.dir,
                            pbytes,
                            phase,
                            DataRef::Buffer { offset: off },
                            Delivery::Reduce { offset: off },
                        );
                        let (origin, deps) = if t == 0 {
                            (SendOrigin::Memory, entry[i].clone())
                        } else {
                            (SendOrigin::Reduced, vec![last[i].expect("previous reduce")])
                        };
                        let send = b.step(
                            m[i],
                            phase,
                            Action::SendMsg {
                                msg,
                                dst: m[to],
                                origin,
                            },
                            deps,
                        );
                        let recv = b.step(m[to], phase, Action::RecvMsg { msg, src: m[i] }, vec![send]);
                        let mut rdeps = vec![recv];
                        if t == 0 {
                            rdeps.extend(entry[to].iter().copied());
                        } else {
                            rdeps.push(last[to].expect("previous reduce"));
                        }
                        let persist = t == k - 2;
                        let red = b.step(m[to], phase, Action::ReduceLocal { msg, persist }, rdeps);
                        group_steps[i].push(send);
                        group_steps[to].push(red);
                        next_last[to] = Some(red);
                    }
                    last = next_last;
                }
            }

            if matches!(op, RingOp::AllGather | RingOp::AllReduce) {
                let fused = op == RingOp::AllReduce;
                for t in 0..k - 1 {
                    let mut next_last = vec![None; k];
                    for i in 0..k {
                        let to = (i + 1) % k;
                        let s = (owned_segment(i, k) + k - t % k) % k;
                        let off = seg_off(s) + pr.start;
                        let msg = b.message(
                            m[i],
                            m[to],
                            ring.dim,
                            ring.dir,
                            pbytes,
                            phase,
                            DataRef::Buffer { offset: off },
                            Delivery::Store { offset: off },
                        );
                        let (origin, deps) = match (t, fused) {
                            (0, true) => (SendOrigin::Reduced, vec![last[i].expect("final reduce")]),
                            (0, false) => (SendOrigin::Memory, entry[i].clone()),
                            _ => (SendOrigin::Forwarded, vec![last[i].expect("previous store")]),
                        };
                        let send = b.step(
                            m[i],
                            phase,
                            Action::SendMsg {
                                msg,
                                dst: m[to],
                                origin,
                            },
                            deps,
                        );
                        let recv = b.step(m[to], phase, Action::RecvMsg { msg, src: m[i] }, vec![send]);
                        let mut sdeps = vec![recv];
                        match (t, fused) {
                            (0, false) => sdeps.extend(entry[to].iter().copied()),
                            _ => sdeps.push(last[to].expect("previous step")),
                        }
                        let store = b.step(m[to], phase, Action::StoreFinal { msg }, sdeps);
                        group_steps[i].push(send);
                        group_steps[to].push(store);
                        next_last[to] = Some(store);
                    }
                    last = next_last;
                }
            }

            for (pos, &n) in m.iter().enumerate() {
                b.tail[n] = std::mem::take(&mut group_steps[pos]);
            }
        }
    }

    let (kind, input, output) = match op {
        RingOp::ReduceScatter => (PhaseKind::ReduceScatter, len, seg_len),
        RingOp::AllGather => (PhaseKind::AllGather, seg_len, len),
        RingOp::AllReduce => (PhaseKind::AllReduce, len, len),
    };
    PhaseInfo {
        kind,
        dim: Some(rings[0].dim),
        ring_len: k,
        input_bytes: input,
        output_bytes: output,
        messages: groups * k as u64,
        message_bytes: seg_len.div_ceil(groups),
    }
}

fn single_ring_schedule(
    kind: CollectiveKind,
    op: RingOp,
    ring: &Ring,
    node_count: usize,
    chunk: &ChunkPlan,
) -> CollectiveSchedule {
    let k = ring.len();
    if k < 2 {
        return CollectiveSchedule::empty(kind, *chunk, node_count);
    }
    let padded = chunk.payload_bytes.div_ceil(k as u64).max(1) * k as u64;
    let seg_len = padded / k as u64;
    let mut input = vec![0..0; node_count];
    let mut result = vec![0..0; node_count];
    for (pos, &n) in ring.members.iter().enumerate() {
        let own = owned_segment(pos, k) as u64 * seg_len;
        let (i, r) = match op {
            RingOp::ReduceScatter => (0..padded, own..own + seg_len),
            RingOp::AllGather => (own..own + seg_len, 0..padded),
            RingOp::AllReduce => (0..padded, 0..padded),
        };
        input[n] = i;
        result[n] = r;
    }
    let mut b = Builder::new(node_count, chunk.payload_bytes);
    for &n in &ring.members {
        let bytes = input[n].end - input[n].start;
        let id = b.step(n, 0, Action::LoadFromMemory { bytes }, Vec::new());
        b.tail[n].push(id);
    }
    let info = emit_ring_phase(
        &mut b,
        std::slice::from_ref(ring),
        op,
        0,
        padded,
        chunk.message_bytes,
        0,
    );
    for &n in &ring.members {
        let bytes = result[n].end - result[n].start;
        let deps = b.take_tail(n);
        let id = b.step(n, 0, Action::WriteToMemory { bytes }, deps);
        b.tail[n].push(id);
    }
    b.finish(kind, *chunk, padded, vec![info], input, result)
}

/// Ring reduce-scatter. Position `i` ends owning segment `(i + 1) mod k`.
pub fn plan_ring_reduce_scatter(ring: &Ring, node_count: usize, chunk: &ChunkPlan) -> CollectiveSchedule {
    single_ring_schedule(CollectiveKind::ReduceScatter, RingOp::ReduceScatter, ring, node_count, chunk)
}

/// Ring all-gather. Position `i` starts with segment `(i + 1) mod k`.
pub fn plan_ring_all_gather(ring: &Ring, node_count: usize, chunk: &ChunkPlan) -> CollectiveSchedule {
    single_ring_schedule(CollectiveKind::AllGather, RingOp::AllGather, ring, node_count, chunk)
}

/// Ring all-reduce: reduce-scatter followed by all-gather, per message group.
pub fn plan_ring_all_reduce(ring: &Ring, node_count: usize, chunk: &ChunkPlan) -> CollectiveSchedule {
    single_ring_schedule(CollectiveKind::AllReduce, RingOp::AllReduce, ring, node_count, chunk)
}

/// All rings of `dim`, each walked in `dir` starting from coordinate 0.
fn rings_in(topo: &Topology, dim: Dim, dir: Dir) -> Vec<Ring> {
    let dims = topo.dims();
    let mut rings = Vec::new();
    for flat in 0..dims.node_count() {
        let n = dims.node(flat);
        if n.coord(dim) == 0 {
            rings.push(Ring::new(topo, n, dim, dir));
        }
    }
    rings
}

/// Position of `node` within its ring along `dim` when walking `dir` from 0.
fn ring_pos(dims: Dims, node: NodeId, dim: Dim, dir: Dir) -> usize {
    let len = dims.len(dim);
    let c = node.coord(dim);
    match dir {
        Dir::Up => c,
        Dir::Down => (len - c) % len,
    }
}

fn pad_to(n: u64, m: u64) -> u64 {
    n.div_ceil(m).max(1) * m
}

/// Hierarchical collective on the full torus.
///
/// All-reduce runs local reduce-scatter, vertical all-reduce, horizontal
/// all-reduce and local all-gather; on a single ring it is the ring
/// all-reduce. Reduce-scatter and all-gather use the
/// same dimension order (reversed for all-gather) with only the matching
/// halves. Dimensions of length 1 are skipped. `dir` picks the ring
/// direction in every dimension.
pub fn plan_hierarchical(
    kind: CollectiveKind,
    topo: &Topology,
    chunk: &ChunkPlan,
    dir: Dir,
) -> CollectiveSchedule {
    assert!(kind != CollectiveKind::AllToAll, "all-to-all is not ring based");
    let dims = topo.dims();
    let n = dims.node_count();
    if n < 2 {
        return CollectiveSchedule::empty(kind, *chunk, n);
    }
    let active: Vec<Dim> = Dim::ALL.into_iter().filter(|&d| dims.len(d) >= 2).collect();
    let padded = pad_to(chunk.payload_bytes, n as u64);

    // The range a node works on shrinks by the ring length after each
    // reduce-scatter stage; compute it per node per stage.
    let shrink = |node: NodeId, stages: &[Dim]| -> Range<u64> {
        let mut r = 0..padded;
        for &d in stages {
            let k = dims.len(d);
            let seg = (r.end - r.start) / k as u64;
            let s = owned_segment(ring_pos(dims, node, d, dir), k) as u64;
            r = r.start + s * seg..r.start + (s + 1) * seg;
        }
        r
    };

    let all_nodes: Vec<NodeId> = (0..n).map(|f| dims.node(f)).collect();
    let full = vec![0..padded; n];
    let mut phases = Vec::new();
    let mut b = Builder::new(n, chunk.payload_bytes);

    let (input, result) = match kind {
        CollectiveKind::AllReduce => (full.clone(), full.clone()),
        CollectiveKind::ReduceScatter => (full.clone(), all_nodes.iter().map(|&x| shrink(x, &active)).collect()),
        CollectiveKind::AllGather => (all_nodes.iter().map(|&x| shrink(x, &active)).collect(), full.clone()),
        CollectiveKind::AllToAll => unreachable!(),
    };
    b.load_all(&input);

    // Each node in a ring of dimension `d` works on the same range, so the
    // range can be taken from the ring's first member.
    let emit = |b: &mut Builder, d: Dim, op: RingOp, prior: &[Dim], phases: &mut Vec<PhaseInfo>| {
        let phase = phases.len() as u8;
        let rings = rings_in(topo, d, dir);
        // Rings that share a working range are emitted together.
        let mut by_range: BTreeMap<(u64, u64), Vec<Ring>> = BTreeMap::new();
        for r in rings {
            let head = dims.node(r.members[0]);
            let range = shrink(head, prior);
            by_range.entry((range.start, range.end)).or_default().push(r);
        }
        let mut info = None;
        for ((start, end), rings) in by_range {
            info = Some(emit_ring_phase(b, &rings, op, start, end - start, chunk.message_bytes, phase));
        }
        phases.push(info.expect("at least one ring"));
    };

    match kind {
        CollectiveKind::AllReduce if active == [Dim::Local] => {
            // a single ring: the plain ring all-reduce
            emit(&mut b, Dim::Local, RingOp::AllReduce, &[], &mut phases);
        }
        CollectiveKind::AllReduce => {
            let local = dims.l >= 2;
            if local {
                emit(&mut b, Dim::Local, RingOp::ReduceScatter, &[], &mut phases);
            }
            let prior: Vec<Dim> = if local { vec![Dim::Local] } else { vec![] };
            for d in [Dim::Vertical, Dim::Horizontal] {
                if dims.len(d) >= 2 {
                    emit(&mut b, d, RingOp::AllReduce, &prior, &mut phases);
                }
            }
            if local {
                emit(&mut b, Dim::Local, RingOp::AllGather, &[], &mut phases);
            }
        }
        CollectiveKind::ReduceScatter => {
            for (i, &d) in active.iter().enumerate() {
                emit(&mut b, d, RingOp::ReduceScatter, &active[..i], &mut phases);
            }
        }
        CollectiveKind::AllGather => {
            for i in (0..active.len()).rev() {
                emit(&mut b, active[i], RingOp::AllGather, &active[..i], &mut phases);
            }
        }
        CollectiveKind::AllToAll => unreachable!(),
    }
    let last = phases.len().saturating_sub(1) as u8;
    b.write_all(&result, last);
    b.finish(kind, *chunk, padded, phases, input, result)
}

/// Four-phase hierarchical all-reduce.
pub fn plan_hierarchical_all_reduce(topo: &Topology, chunk: &ChunkPlan, dir: Dir) -> CollectiveSchedule {
    plan_hierarchical(CollectiveKind::AllReduce, topo, chunk, dir)
}

/// Direct all-to-all: every node sends portion `j` of its buffer to node
/// `j`, which stores it at portion `i`. Multi-hop portions follow XYZ
/// routing and are relayed by intermediate nodes.
pub fn plan_direct_all_to_all(topo: &Topology, chunk: &ChunkPlan) -> CollectiveSchedule {
    let dims = topo.dims();
    let n = dims.node_count();
    let kind = CollectiveKind::AllToAll;
    if n < 2 {
        return CollectiveSchedule::empty(kind, *chunk, n);
    }
    let padded = pad_to(chunk.payload_bytes, n as u64);
    let portion = padded / n as u64;
    let pieces = portion.div_ceil(chunk.message_bytes).max(1);
    let full = vec![0..padded; n];
    let mut b = Builder::new(n, chunk.payload_bytes);
    b.load_all(&full);
    let loads: Vec<StepId> = (0..n).map(|i| b.tail[i][0]).collect();

    // first-hop send of (src -> dst, piece)
    let mut first_send = vec![Vec::new(); n * n];
    let mut finals: Vec<Vec<StepId>> = vec![Vec::new(); n];

    for src in 0..n {
        for dst in 0..n {
            if src == dst {
                continue;
            }
            let route = topo.xyz_route(dims.node(src), dims.node(dst));
            for p in 0..pieces {
                let pr = piece(portion, pieces, p);
                let bytes = pr.end - pr.start;
                if bytes == 0 {
                    continue;
                }
                let src_off = dst as u64 * portion + pr.start;
                let dst_off = src as u64 * portion + pr.start;
                let mut prev_recv: Option<(StepId, MsgId)> = None;
                for (h, hop) in route.iter().enumerate() {
                    let from = dims.flat(hop.from);
                    let to = dims.flat(hop.to);
                    let last = h + 1 == route.len();
                    let data = match prev_recv {
                        None => DataRef::Buffer { offset: src_off },
                        Some((_, m)) => DataRef::Relay { msg: m },
                    };
                    let delivery = if last {
                        Delivery::Store { offset: dst_off }
                    } else {
                        Delivery::Relay
                    };
                    let msg = b.message(from, to, hop.dim, hop.dir, bytes, 0, data, delivery);
                    let (origin, deps) = match prev_recv {
                        None => (SendOrigin::Memory, vec![loads[from]]),
                        Some((r, _)) => (SendOrigin::Forwarded, vec![r]),
                    };
                    let send = b.step(from, 0, Action::SendMsg { msg, dst: to, origin }, deps);
                    if prev_recv.is_none() {
                        first_send[src * n + dst].push(send);
                    }
                    let recv = b.step(to, 0, Action::RecvMsg { msg, src: from }, vec![send]);
                    if last {
                        // The store overwrites the range this node sends back
                        // to `src`; it must follow that send.
                        let store = b.step(to, 0, Action::StoreFinal { msg }, vec![recv, loads[to]]);
                        finals[to].push(store);
                    } else {
                        finals[to].push(recv);
                    }
                    finals[from].push(send);
                    prev_recv = Some((recv, msg));
                }
            }
        }
    }
    // WAR ordering: store of (src -> dst, p) after dst's send of (dst -> src, p).
    for s in &mut b.steps {
        if let Action::StoreFinal { msg } = s.action {
            let (final_dst, origin_src) = (s.node, origin_of(&b.messages, msg));
            let p_idx = piece_index(&b.messages, msg, portion, pieces);
            if let Some(&sent) = first_send[final_dst * n + origin_src].get(p_idx) {
                s.deps.push(sent);
            }
        }
    }
    for node in 0..n {
        b.tail[node] = std::mem::take(&mut finals[node]);
    }
    b.write_all(&full, 0);
    let info = PhaseInfo {
        kind: PhaseKind::AllToAll,
        dim: None,
        ring_len: n,
        input_bytes: padded,
        output_bytes: padded,
        messages: pieces * (n as u64 - 1),
        message_bytes: portion.div_ceil(pieces),
    };
    b.finish(kind, *chunk, padded, vec![info], full.clone(), full)
}

fn origin_of(messages: &[Message], mut msg: MsgId) -> usize {
    loop {
        match messages[msg as usize].data {
            DataRef::Buffer { .. } => return messages[msg as usize].src,
            DataRef::Relay { msg: prev } => msg = prev,
        }
    }
}

fn piece_index(messages: &[Message], msg: MsgId, portion: u64, pieces: u64) -> usize {
    let Delivery::Store { offset } = messages[msg as usize].delivery else {
        unreachable!("final hop stores")
    };
    let within = offset % portion;
    (0..pieces)
        .position(|p| piece(portion, pieces, p).start == within)
        .expect("piece boundary")
}

/// Plans `kind` over the whole topology.
pub fn plan_collective(kind: CollectiveKind, topo: &Topology, chunk: &ChunkPlan, dir: Dir) -> CollectiveSchedule {
    match kind {
        CollectiveKind::AllToAll => plan_direct_all_to_all(topo, chunk),
        _ => plan_hierarchical(kind, topo, chunk, dir),
    }
}

/// Executes a schedule on integer data in a topological order and returns
/// every node's final buffer, truncated to the payload length.
pub fn execute_oracle(schedule: &CollectiveSchedule, initial: &[Vec<i64>]) -> Result<Vec<Vec<i64>>, ScheduleError> {
    let order = schedule.validated_order()?;
    if initial.len() != schedule.node_count {
        return Err(ScheduleError::NodeCount {
            expected: schedule.node_count,
            got: initial.len(),
        });
    }
    let len = schedule.plan.payload_bytes as usize;
    for (node, v) in initial.iter().enumerate() {
        if v.len() != len {
            return Err(ScheduleError::VectorLength {
                node,
                expected: len,
                got: v.len(),
            });
        }
    }
    let padded = schedule.padded_bytes as usize;
    let mut buf: Vec<Vec<i64>> = initial
        .iter()
        .map(|v| {
            let mut b = v.clone();
            b.resize(padded, 0);
            b
        })
        .collect();

    // Each message owns a slot in one arena; `state` tracks sent/received.
    let mut slot = Vec::with_capacity(schedule.messages.len() + 1);
    slot.push(0usize);
    for m in &schedule.messages {
        slot.push(slot.last().unwrap() + m.bytes as usize);
    }
    let mut arena = vec![0i64; *slot.last().unwrap()];
    let mut state = vec![0u8; schedule.messages.len()];
    let range = |msg: MsgId| slot[msg as usize]..slot[msg as usize + 1];

    for id in order {
        let step = &schedule.steps[id as usize];
        match step.action {
            Action::LoadFromMemory { .. } | Action::WriteToMemory { .. } => {}
            Action::SendMsg { msg, .. } => {
                let m = &schedule.messages[msg as usize];
                match m.data {
                    DataRef::Buffer { offset } => {
                        let o = offset as usize;
                        arena[range(msg)].copy_from_slice(&buf[step.node][o..o + m.bytes as usize]);
                    }
                    DataRef::Relay { msg: prev } => {
                        if state[prev as usize] != 2 {
                            return Err(ScheduleError::NotReceived { msg: prev });
                        }
                        let src = range(prev);
                        arena.copy_within(src, slot[msg as usize]);
                    }
                }
                state[msg as usize] = 1;
            }
            Action::RecvMsg { msg, .. } => {
                if state[msg as usize] != 1 {
                    return Err(ScheduleError::NotReceived { msg });
                }
                state[msg as usize] = 2;
            }
            Action::ReduceLocal { msg, .. } | Action::StoreFinal { msg } => {
                if state[msg as usize] != 2 {
                    return Err(ScheduleError::NotReceived { msg });
                }
                let data = &arena[range(msg)];
                let m = &schedule.messages[msg as usize];
                match (step.action, m.delivery) {
                    (Action::ReduceLocal { .. }, Delivery::Reduce { offset }) => {
                        let o = offset as usize;
                        for (dst, x) in buf[step.node][o..o + data.len()].iter_mut().zip(data) {
                            *dst = dst.wrapping_add(*x);
                        }
                    }
                    (Action::StoreFinal { .. }, Delivery::Store { offset }) => {
                        let o = offset as usize;
                        buf[step.node][o..o + data.len()].copy_from_slice(data);
                    }
                    _ => return Err(ScheduleError::NotReceived { msg }),
                }
            }
        }
    }
    for b in &mut buf {
        b.truncate(len);
    }
    Ok(buf)
}
