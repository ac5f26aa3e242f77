use collfab::collectives::*;
use collfab::topology::{Dim, Dims, Dir, LinkParams, NodeId, Topology};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn torus(d: Dims) -> Topology {
    Topology::build_torus(d, &LinkParams::default()).unwrap()
}

fn small_dims(max_nodes: usize) -> Vec<Dims> {
    let mut out = Vec::new();
    for l in 1..=max_nodes {
        for v in 1..=max_nodes {
            for h in 1..=max_nodes {
                if l * v * h <= max_nodes {
                    out.push(Dims::new(l, v, h));
                }
            }
        }
    }
    out
}

/// Direct definition of each collective on the padded buffers.
fn reference(s: &CollectiveSchedule, init: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let n = s.node_count;
    let len = s.plan.payload_bytes as usize;
    let padded = s.padded_bytes as usize;
    let at = |node: usize, i: usize| if i < len { init[node][i] } else { 0 };
    let mut out: Vec<Vec<i64>> = init.to_vec();
    match s.kind {
        CollectiveKind::AllReduce | CollectiveKind::ReduceScatter => {
            for node in 0..n {
                for i in s.result[node].start as usize..(s.result[node].end as usize).min(len) {
                    out[node][i] = (0..n).map(|m| at(m, i)).sum();
                }
            }
        }
        CollectiveKind::AllGather => {
            for node in 0..n {
                for i in 0..len {
                    let owner = (0..n)
                        .find(|&m| s.input[m].contains(&(i as u64)))
                        .expect("every element has an owner");
                    out[node][i] = at(owner, i);
                }
            }
        }
        CollectiveKind::AllToAll => {
            let p = padded / n;
            for j in 0..n {
                for i in 0..n {
                    for e in 0..p {
                        if i * p + e < len {
                            out[j][i * p + e] = at(i, j * p + e);
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn oracle_equivalence_all_kinds_small_topologies() {
    let kinds = [
        CollectiveKind::ReduceScatter,
        CollectiveKind::AllGather,
        CollectiveKind::AllReduce,
        CollectiveKind::AllToAll,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for dims in small_dims(16) {
        let topo = torus(dims);
        let n = dims.node_count();
        for kind in kinds {
            for dir in [Dir::Up, Dir::Down] {
                // odd payload exercises padding; small messages force several groups
                let payload = (3 * n + 5) as u64;
                let plan = ChunkPlan::new(payload).with_message_bytes(2);
                let s = plan_collective(kind, &topo, &plan, dir);
                for _ in 0..50 {
                    let init: Vec<Vec<i64>> = (0..n)
                        .map(|_| (0..payload).map(|_| rng.gen_range(-1000..1000)).collect())
                        .collect();
                    let got = execute_oracle(&s, &init).unwrap();
                    let want = reference(&s, &init);
                    for node in 0..n {
                        let end = (s.result[node].end as usize).min(payload as usize);
                        let r = (s.result[node].start as usize).min(end)..end;
                        assert_eq!(
                            &got[node][r.clone()],
                            &want[node][r],
                            "{kind} on {dims} dir {dir:?} node {node}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn ring_all_reduce_volume_k2_to_9() {
    for k in 2..=9 {
        let topo = torus(Dims::new(k, 1, 1));
        let ring = Ring::new(&topo, NodeId::new(0, 0, 0), Dim::Local, Dir::Up);
        let payload = (k * 1000) as u64;
        let s = plan_ring_all_reduce(&ring, k, &ChunkPlan::new(payload).with_message_bytes(64));
        assert_eq!(s.rounds() as u64 % (2 * (k as u64 - 1)), 0);
        for sent in s.sent_bytes_per_node() {
            assert_eq!(sent * k as u64, 2 * (k as u64 - 1) * payload, "k={k}");
        }
    }
}

fn hier_formula(d: Dims, n: u64) -> u64 {
    // every term scaled by L*V*H so the result is exact
    let (l, v, h) = (d.l as u64, d.v as u64, d.h as u64);
    let nl = n / l;
    (l - 1) * n / l + 2 * (v - 1) * nl / v + 2 * (h - 1) * nl / h + (l - 1) * n / l
}

#[test]
fn hierarchical_formula_over_dims_grid() {
    for &l in &[1, 2, 4] {
        for &v in &[1, 2, 4] {
            for &h in &[1, 2, 4] {
                let d = Dims::new(l, v, h);
                let n = 64 * 1024;
                let s = plan_hierarchical_all_reduce(&torus(d), &ChunkPlan::new(n), Dir::Up);
                s.validate().unwrap();
                for sent in s.sent_bytes_per_node() {
                    assert_eq!(sent, hier_formula(d, n), "{d}");
                }
            }
        }
    }
}

#[test]
fn byte_conservation_and_acyclic_for_all_planners() {
    for dims in small_dims(16) {
        let topo = torus(dims);
        for kind in [
            CollectiveKind::ReduceScatter,
            CollectiveKind::AllGather,
            CollectiveKind::AllReduce,
            CollectiveKind::AllToAll,
        ] {
            let s = plan_collective(kind, &topo, &ChunkPlan::new(1000).with_message_bytes(37), Dir::Up);
            s.validate().unwrap();
            let sent: u64 = s.sent_bytes_per_node().iter().sum();
            let recv: u64 = s.received_bytes_per_node().iter().sum();
            assert_eq!(sent, recv);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn all_reduce_of_ones_is_node_count(l in 1usize..5, v in 1usize..4, h in 1usize..4,
                                        payload in 1u64..200, msg in 1u64..40) {
        let dims = Dims::new(l, v, h);
        let n = dims.node_count();
        let s = plan_hierarchical_all_reduce(&torus(dims), &ChunkPlan::new(payload).with_message_bytes(msg), Dir::Down);
        let out = execute_oracle(&s, &vec![vec![1; payload as usize]; n]).unwrap();
        for v in out {
            prop_assert!(v.iter().all(|&x| x == n as i64));
        }
    }

    #[test]
    fn messages_never_exceed_limit(l in 1usize..5, v in 1usize..5, payload in 1u64..5000, msg in 1u64..600) {
        let topo = torus(Dims::new(l, v, 2));
        let plan = ChunkPlan::new(payload).with_message_bytes(msg);
        for kind in [CollectiveKind::AllReduce, CollectiveKind::AllToAll] {
            let s = plan_collective(kind, &topo, &plan, Dir::Up);
            prop_assert!(s.messages.iter().all(|m| m.bytes <= msg && m.bytes > 0));
        }
    }
}
