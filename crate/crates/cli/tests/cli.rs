use std::path::Path;
use std::process::{Command, Output};

use collfab::collectives::{plan_ring_all_reduce, ChunkPlan, Ring};
use collfab::topology::{Dim, Dims, Dir, LinkParams, NodeId, Topology};

fn collfab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_collfab"))
        .args(args)
        .env("COLLFAB_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL: &str = r#"
system_config = "ace"

[topology]
dims = "2x2x2"

[microbenchmark]
kind = "all_reduce"
payload_kib = 512
"#;

#[test]
fn run_writes_reports_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let o = collfab(&["run", "--config", &cfg, "--out", d.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["report.json", "timeline.csv"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    let csv = std::fs::read_to_string(a.join("timeline.csv")).unwrap();
    assert!(csv.starts_with("window_index,utilization\n0,"));
}

#[test]
fn missing_dims_exits_2_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "[microbenchmark]\n");
    let o = collfab(&["run", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("topology.dims"));
    let o = collfab(&["validate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", &format!("{SMALL}\n[output]\nfolder = \"x\"\n"));
    let o = collfab(&["validate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("folder"));
}

#[test]
fn deadlocked_schedule_exits_3_with_blocked_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let topo = Topology::build_torus(Dims::new(2, 1, 1), &LinkParams::default()).unwrap();
    let ring = Ring::new(&topo, NodeId::new(0, 0, 0), Dim::Local, Dir::Up);
    let mut s = plan_ring_all_reduce(&ring, 2, &ChunkPlan::new(512));
    let last = s.steps.len() as u32 - 1;
    s.steps[0].deps.push(last);
    write(tmp.path(), "cyclic.json", &serde_json::to_string(&s).unwrap());
    let cfg = write(
        tmp.path(),
        "c.toml",
        "[topology]\ndims = \"2x1x1\"\n[microbenchmark]\nschedule = \"cyclic.json\"\n",
    );
    let o = collfab(&["run", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("deadlock") && err.contains("blocked:"), "{err}");
}

#[test]
fn validate_prints_hash_and_dumps_schedules() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    let o = collfab(&["validate", "--config", &cfg, "--dump-schedule"]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.starts_with("ok "));
    assert!(out.contains("# all_reduce"));
    assert!(out.contains("SendMsg"));
}

#[test]
fn sweep_runs_the_cartesian_product() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.toml",
        "[topology]\ndims = \"2x2x1\"\n[microbenchmark]\npayload_kib = 64\n",
    );
    let out = tmp.path().join("s");
    let o = collfab(&[
        "sweep",
        "--config",
        &cfg,
        "--axis",
        "topology.dims=2x1x1,2x2x1,2x2x2",
        "--axis",
        "system_config=ideal,ace,baseline_no_overlap,baseline_comm_opt,baseline_comp_opt",
        "--jobs",
        "2",
        "--out",
        out.to_str().unwrap(),
        "--dump-schedule",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 15);
    assert!(csv.starts_with("point,topology.dims,system_config,"));
    assert!(out.join("point-014/report.json").exists());
    assert!(out.join("point-000/schedule.all_reduce.jsonl").exists());
}

#[test]
fn empty_sweep_is_one_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    let out = tmp.path().join("s");
    let o = collfab(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn oracle_check_passes_and_catches_a_mutant() {
    let o = collfab(&["oracle-check", "--max-nodes", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let o = collfab(&["oracle-check", "--max-nodes", "4", "--mutate", "wrong-segment"]);
    assert_ne!(o.status.code(), Some(0));
    let dump: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(dump["input"].is_array());
    assert!(String::from_utf8_lossy(&o.stderr).contains("mismatch"));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let o = collfab(&["validate", "--config", p.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", p.display());
    }
}
