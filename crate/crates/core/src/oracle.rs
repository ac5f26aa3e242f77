//! Exhaustive comparison of planned schedules against the direct
//! definition of each collective on small tori.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::collectives::{execute_oracle, plan_collective, ChunkPlan, CollectiveKind, CollectiveSchedule, DataRef};
use crate::topology::{Dims, Dir, LinkParams, Topology};

pub const KINDS: [CollectiveKind; 4] = [
    CollectiveKind::ReduceScatter,
    CollectiveKind::AllGather,
    CollectiveKind::AllReduce,
    CollectiveKind::AllToAll,
];

/// Builds the schedule for one chunk.
pub type Planner = dyn Fn(CollectiveKind, &Topology, &ChunkPlan, Dir) -> CollectiveSchedule + Sync;

/// Every torus shape with at most `max_nodes` nodes, smallest first.
pub fn small_dims(max_nodes: usize) -> Vec<Dims> {
    let mut out = Vec::new();
    for l in 1..=max_nodes {
        for v in 1..=max_nodes / l {
            for h in 1..=max_nodes / (l * v) {
                out.push(Dims::new(l, v, h));
            }
        }
    }
    out.sort_by_key(|d| (d.node_count(), d.l, d.v, d.h));
    out
}

/// What each node must hold afterwards, computed straight from the
/// definition on the zero-padded inputs.
pub fn reference(s: &CollectiveSchedule, init: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let n = s.node_count;
    let len = s.plan.payload_bytes as usize;
    let at = |node: usize, i: usize| if i < len { init[node][i] } else { 0 };
    let mut out: Vec<Vec<i64>> = init.to_vec();
    match s.kind {
        CollectiveKind::AllReduce | CollectiveKind::ReduceScatter => {
            for (node, o) in out.iter_mut().enumerate() {
                for i in s.result[node].start as usize..(s.result[node].end as usize).min(len) {
                    o[i] = (0..n).map(|m| at(m, i)).sum();
                }
            }
        }
        CollectiveKind::AllGather => {
            for o in out.iter_mut() {
                for (i, x) in o.iter_mut().enumerate().take(len) {
                    if let Some(owner) = (0..n).find(|&m| s.input[m].contains(&(i as u64))) {
                        *x = at(owner, i);
                    }
                }
            }
        }
        CollectiveKind::AllToAll => {
            let p = s.padded_bytes as usize / n;
            for (j, o) in out.iter_mut().enumerate() {
                for i in 0..n {
                    for e in 0..p {
                        if i * p + e < len {
                            o[i * p + e] = at(i, j * p + e);
                        }
                    }
                }
            }
        }
    }
    out
}

/// The first mismatch found, with inputs as small as could be made.
#[derive(Debug, Clone, Serialize)]
pub struct Counterexample {
    pub kind: CollectiveKind,
    pub dims: String,
    pub dir: Dir,
    pub node: usize,
    pub payload_bytes: u64,
    pub input: Vec<Vec<i64>>,
    pub expected: Vec<i64>,
    pub got: Vec<i64>,
    /// Set when the schedule could not be executed at all.
    pub error: Option<String>,
}

impl std::fmt::Display for Counterexample {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} on {} ({:?}), node {}", self.kind, self.dims, self.dir, self.node)?;
        if let Some(e) = &self.error {
            return write!(f, ": {e}");
        }
        write!(f, ": expected {:?}, got {:?}", self.expected, self.got)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OracleSummary {
    pub schedules: usize,
    pub vectors: usize,
}

fn first_mismatch(s: &CollectiveSchedule, init: &[Vec<i64>]) -> Option<(usize, Vec<i64>, Vec<i64>, Option<String>)> {
    let got = match execute_oracle(s, init) {
        Ok(g) => g,
        Err(e) => return Some((0, Vec::new(), Vec::new(), Some(e.to_string()))),
    };
    let want = reference(s, init);
    let len = s.plan.payload_bytes as usize;
    (0..s.node_count).find_map(|node| {
        let end = (s.result[node].end as usize).min(len);
        let r = (s.result[node].start as usize).min(end)..end;
        (got[node][r.clone()] != want[node][r.clone()]).then(|| (node, want[node][r.clone()].to_vec(), got[node][r].to_vec(), None))
    })
}

/// Tries single-one inputs, which isolate the element that goes astray.
fn shrink(s: &CollectiveSchedule, fallback: Vec<Vec<i64>>) -> Vec<Vec<i64>> {
    let n = s.node_count;
    let len = s.plan.payload_bytes as usize;
    for m in 0..n {
        for i in 0..len {
            let mut init = vec![vec![0; len]; n];
            init[m][i] = 1;
            if first_mismatch(s, &init).is_some() {
                return init;
            }
        }
    }
    fallback
}

/// Runs every kind in both ring directions on every torus up to
/// `max_nodes`, with `vectors` random inputs per schedule.
pub fn check(max_nodes: usize, vectors: usize, seed: u64, planner: &Planner) -> Result<OracleSummary, Box<Counterexample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = OracleSummary { schedules: 0, vectors: 0 };
    for dims in small_dims(max_nodes) {
        let topo = Topology::build_torus(dims, &LinkParams::default()).expect("small torus builds");
        let n = dims.node_count();
        // odd payload exercises padding; small messages force several groups
        let payload = (3 * n + 5) as u64;
        let plan = ChunkPlan::new(payload).with_message_bytes(2);
        for kind in KINDS {
            for dir in [Dir::Up, Dir::Down] {
                let s = planner(kind, &topo, &plan, dir);
                summary.schedules += 1;
                for _ in 0..vectors {
                    let init: Vec<Vec<i64>> = (0..n)
                        .map(|_| (0..payload).map(|_| rng.gen_range(-1000..1000)).collect())
                        .collect();
                    summary.vectors += 1;
                    if first_mismatch(&s, &init).is_some() {
                        let input = shrink(&s, init);
                        let (node, expected, got, error) = first_mismatch(&s, &input).expect("shrunk input still fails");
                        return Err(Box::new(Counterexample {
                            kind,
                            dims: dims.to_string(),
                            dir,
                            node,
                            payload_bytes: payload,
                            input,
                            expected,
                            got,
                            error,
                        }));
                    }
                }
            }
        }
    }
    Ok(summary)
}

/// The real planners.
pub fn default_planner(kind: CollectiveKind, topo: &Topology, plan: &ChunkPlan, dir: Dir) -> CollectiveSchedule {
    plan_collective(kind, topo, plan, dir)
}

/// A deliberately broken planner: the first message that can be moved
/// reads the neighbouring segment instead of its own.
pub fn wrong_segment_planner(kind: CollectiveKind, topo: &Topology, plan: &ChunkPlan, dir: Dir) -> CollectiveSchedule {
    let mut s = plan_collective(kind, topo, plan, dir);
    let padded = s.padded_bytes;
    for m in s.messages.iter_mut() {
        if let DataRef::Buffer { offset } = m.data {
            let moved = if offset + 2 * m.bytes <= padded {
                offset + m.bytes
            } else if offset >= m.bytes {
                offset - m.bytes
            } else {
                continue;
            };
            m.data = DataRef::Buffer { offset: moved };
            break;
        }
    }
    s
}
