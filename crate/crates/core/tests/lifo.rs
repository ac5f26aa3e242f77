use collfab::collectives::CollectiveKind;
use collfab::endpoint::{Datapath, ResourceBudget};
use collfab::engine::{run_single, CollId, Driver, Engine, EngineConfig};
use collfab::topology::{Dims, LinkParams, Topology};
use collfab::units::KIB;

const CHUNK: u64 = 64 * KIB;

fn setup(datapath: Datapath) -> (EngineConfig, Topology) {
    let cfg = EngineConfig {
        datapath,
        budget: ResourceBudget {
            mem_bw_comm_gbps: 450.0,
            sm_comm: 80,
            ..Default::default()
        },
        max_inflight_chunks: 4,
        ..Default::default()
    };
    let topo = Topology::build_torus(Dims::new(2, 2, 1), &LinkParams::default()).unwrap();
    (cfg, topo)
}

/// Issues A at zero and B once A is partly through.
struct TwoCollectives {
    b_at: u64,
    a: Option<CollId>,
    b: Option<CollId>,
    a_admitted_when_b_issued: usize,
}

impl Driver for TwoCollectives {
    fn start(&mut self, eng: &mut Engine) {
        self.a = Some(eng.issue(CollectiveKind::AllReduce, 16 * CHUNK));
        eng.set_timer(self.b_at, 0);
    }

    fn timer(&mut self, eng: &mut Engine, _token: u64) {
        self.a_admitted_when_b_issued = eng.admissions().len();
        self.b = Some(eng.issue(CollectiveKind::AllReduce, 4 * CHUNK));
    }
}

fn preempt(datapath: Datapath) {
    let (cfg, topo) = setup(datapath);
    let alone = run_single(&cfg, &topo, CollectiveKind::AllReduce, 16 * CHUNK).unwrap().finish;
    let mut d = TwoCollectives {
        b_at: alone / 2,
        a: None,
        b: None,
        a_admitted_when_b_issued: 0,
    };
    let mut eng = Engine::new(cfg, topo).unwrap();
    let r = eng.run(&mut d).unwrap();
    let (a, b) = (d.a.unwrap(), d.b.unwrap());
    let log = eng.admissions().to_vec();
    let split = d.a_admitted_when_b_issued;
    assert!(split > 4 && split < 16, "A should be part way through, {split} admitted");
    assert!(log[..split].iter().all(|&(c, _)| c == a));
    // from B's issue on, every B chunk is admitted before any further A chunk
    let rest: Vec<CollId> = log[split..].iter().map(|&(c, _)| c).collect();
    assert_eq!(&rest[..4], &[b; 4], "{rest:?}");
    assert!(rest[4..].iter().all(|&c| c == a));
    let chunks: Vec<u64> = log.iter().filter(|&&(c, _)| c == b).map(|&(_, k)| k).collect();
    assert_eq!(chunks, vec![0, 1, 2, 3]);
    let fa = r.collectives[a as usize].finished.unwrap();
    let fb = r.collectives[b as usize].finished.unwrap();
    assert!(fb < fa);
}

#[test]
fn later_collective_preempts_at_chunk_granularity() {
    preempt(Datapath::Ideal);
    preempt(Datapath::Baseline);
    preempt(Datapath::Ace);
}

struct One(u64);

impl Driver for One {
    fn start(&mut self, eng: &mut Engine) {
        eng.issue(CollectiveKind::AllReduce, self.0);
    }
}

#[test]
fn single_collective_is_served_in_chunk_order() {
    for dp in [Datapath::Ideal, Datapath::Baseline, Datapath::Ace] {
        let (cfg, topo) = setup(dp);
        let mut eng = Engine::new(cfg.clone(), topo.clone()).unwrap();
        let r = eng.run(&mut One(10 * CHUNK)).unwrap();
        let order: Vec<(CollId, u64)> = eng.admissions().to_vec();
        assert_eq!(order, (0..10).map(|k| (0, k)).collect::<Vec<_>>());
        // identical to running it with nothing else around
        let alone = run_single(&cfg, &topo, CollectiveKind::AllReduce, 10 * CHUNK).unwrap();
        assert_eq!(r.finish, alone.finish);
    }
}

#[test]
fn lifo_schedule_serves_newest_first() {
    assert_eq!(collfab::workload::lifo_schedule(&[3, 5, 9]), vec![9, 5, 3]);
    assert!(collfab::workload::lifo_schedule(&[]).is_empty());
}
