//! Run configuration: a TOML file naming the fabric, the endpoint, the
//! system under test and what to run on it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analytics::{config_hash, Report, UtilizationTimeline};
use crate::collectives::{plan_collective, ChunkPlan, CollectiveKind, CollectiveSchedule};
use crate::endpoint::{AceConfig, PartitionPolicy, ResourceBudget};
use crate::engine::{CustomSchedule, Engine, EngineConfig, LinkArbitration, SingleCollective};
use crate::error::{ConfigError, Error};
use crate::topology::{Dims, Dir, LinkParams, Topology};
use crate::units::{KIB, MIB};
use crate::workload::{run_dlrm_optimized, run_training, SystemConfig, SystemKind, Workload};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_system")]
    pub system_config: SystemKind,
    #[serde(default)]
    pub topology: TopologySection,
    #[serde(default)]
    pub endpoint: EndpointSection,
    #[serde(default)]
    pub ace: AceSection,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<WorkloadSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub microbenchmark: Option<MicrobenchmarkSection>,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub analytics: AnalyticsSection,
}

fn default_system() -> SystemKind {
    SystemKind::Ace
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    /// `LxVxH`, required.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<String>,
    #[serde(default)]
    pub link: LinkParams,
}

/// Node resources. The two communication shares default to the values of
/// the chosen system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EndpointSection {
    pub mem_bw_gbps: f64,
    pub sm_total: u32,
    pub bus_npu_afi_gbps: f64,
    pub bus_npu_mem_gbps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mem_bw_comm_gbps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sm_comm: Option<u32>,
}

impl Default for EndpointSection {
    fn default() -> Self {
        let b = ResourceBudget::default();
        EndpointSection {
            mem_bw_gbps: b.mem_bw_total_gbps,
            sm_total: b.sm_total,
            bus_npu_afi_gbps: b.bus_npu_afi_gbps,
            bus_npu_mem_gbps: b.bus_npu_mem_gbps,
            mem_bw_comm_gbps: None,
            sm_comm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AceSection {
    pub sram_mib: f64,
    pub fsm_count: usize,
    pub alu_count: usize,
    pub chunks_per_fsm: usize,
    pub partition_policy: PartitionPolicy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fsm_per_phase: Option<Vec<usize>>,
}

impl Default for AceSection {
    fn default() -> Self {
        let a = AceConfig::default();
        AceSection {
            sram_mib: a.sram_bytes as f64 / MIB as f64,
            fsm_count: a.fsm_count,
            alu_count: a.alu_count,
            chunks_per_fsm: a.chunks_per_fsm,
            partition_policy: a.partition_policy,
            fsm_per_phase: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSection {
    pub chunk_kib: u64,
    pub message_kib: u64,
    pub packet_bytes: u64,
    pub max_inflight_chunks: usize,
    pub link_arbitration: LinkArbitration,
}

impl Default for EngineSection {
    fn default() -> Self {
        let e = EngineConfig::default();
        EngineSection {
            chunk_kib: e.chunk_bytes / KIB,
            message_kib: e.message_bytes / KIB,
            packet_bytes: e.packet_bytes,
            max_inflight_chunks: e.max_inflight_chunks,
            link_arbitration: e.link_arbitration,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    /// Path to a JSONL trace, relative to the config file, or the name of
    /// a bundled trace.
    pub trace: String,
    /// Run embedding work off the critical path.
    #[serde(default)]
    pub dlrm_optimized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicrobenchmarkSection {
    #[serde(default = "default_kind")]
    pub kind: CollectiveKind,
    #[serde(default = "default_payload_kib")]
    pub payload_kib: u64,
    /// JSON file with a hand-written single-chunk schedule to run instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<String>,
}

fn default_kind() -> CollectiveKind {
    CollectiveKind::AllReduce
}

fn default_payload_kib() -> u64 {
    64 * 1024
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
    pub report: String,
    pub timeline: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "out".into(),
            report: "report.json".into(),
            timeline: "timeline.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyticsSection {
    pub window_cycles: u64,
}

impl Default for AnalyticsSection {
    fn default() -> Self {
        AnalyticsSection { window_cycles: 1000 }
    }
}

fn toml_error(e: toml::de::Error) -> ConfigError {
    let reason = e.message().to_string();
    // serde names the offending key in its message; keep it as the key
    let key = reason
        .split('`')
        .nth(1)
        .filter(|_| reason.starts_with("unknown field") || reason.starts_with("missing field"))
        .unwrap_or("config")
        .to_string();
    ConfigError::invalid(key, reason)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        toml::from_str(text).map_err(toml_error)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::invalid(path.display().to_string(), e.to_string()))?;
        RunConfig::parse(&text)
    }

    /// Canonical text: every key, defaults spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        config_hash(&self.to_toml())
    }

    /// Replaces one dotted key, as given on a sweep axis. The value is read
    /// as a TOML literal, or as a string when it is not one.
    pub fn with_key(&self, key: &str, value: &str) -> Result<RunConfig, ConfigError> {
        let mut doc = toml::Value::try_from(self).expect("config serializes");
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let mut cur = &mut doc;
        for p in &parts[..parts.len() - 1] {
            let table = cur
                .as_table_mut()
                .ok_or_else(|| ConfigError::invalid(key, "not a table"))?;
            cur = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        cur.as_table_mut()
            .ok_or_else(|| ConfigError::invalid(key, "not a table"))?
            .insert(parts[parts.len() - 1].to_string(), parsed);
        let text = toml::to_string(&doc).map_err(|e| ConfigError::invalid(key, e.to_string()))?;
        RunConfig::parse(&text)
    }

    pub fn dims(&self) -> Result<Dims, ConfigError> {
        self.topology
            .dims
            .as_deref()
            .ok_or_else(|| ConfigError::Missing("topology.dims".into()))?
            .parse()
            .map_err(|e: ConfigError| ConfigError::invalid("topology.dims", e.to_string()))
    }

    pub fn topology(&self) -> Result<Topology, ConfigError> {
        Topology::build_torus(self.dims()?, &self.topology.link)
    }

    /// The chosen system with any endpoint overrides applied.
    pub fn system(&self) -> SystemConfig {
        let mut s = self.system_config.preset();
        let e = &self.endpoint;
        s.budget.mem_bw_total_gbps = e.mem_bw_gbps;
        s.budget.sm_total = e.sm_total;
        s.budget.bus_npu_afi_gbps = e.bus_npu_afi_gbps;
        s.budget.bus_npu_mem_gbps = e.bus_npu_mem_gbps;
        if let Some(v) = e.mem_bw_comm_gbps {
            s.budget.mem_bw_comm_gbps = v;
        }
        if let Some(v) = e.sm_comm {
            s.budget.sm_comm = v;
        }
        s
    }

    pub fn engine_config(&self) -> EngineConfig {
        let a = &self.ace;
        let e = &self.engine;
        let base = EngineConfig {
            ace: AceConfig {
                sram_bytes: (a.sram_mib * MIB as f64).round() as u64,
                fsm_count: a.fsm_count,
                alu_count: a.alu_count,
                chunks_per_fsm: a.chunks_per_fsm,
                partition_policy: a.partition_policy,
                fsm_per_phase: a.fsm_per_phase.clone(),
                ..AceConfig::default()
            },
            chunk_bytes: e.chunk_kib * KIB,
            message_bytes: e.message_kib * KIB,
            packet_bytes: e.packet_bytes,
            max_inflight_chunks: e.max_inflight_chunks,
            link_arbitration: e.link_arbitration,
            window_cycles: self.analytics.window_cycles,
            ..EngineConfig::default()
        };
        self.system().engine_config(&base)
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.topology()?;
        if !(self.ace.sram_mib > 0.0) {
            return Err(ConfigError::invalid("ace.sram_mib", "must be positive"));
        }
        self.engine_config().validate()?;
        let sys = self.system();
        if sys.overlap {
            sys.compute_factor()?;
        }
        match (&self.workload, &self.microbenchmark) {
            (Some(_), Some(_)) => Err(ConfigError::invalid(
                "workload",
                "give either [workload] or [microbenchmark], not both",
            )),
            (None, None) => Err(ConfigError::Missing("workload".into())),
            (None, Some(m)) if m.payload_kib == 0 && m.schedule.is_none() => {
                Err(ConfigError::invalid("microbenchmark.payload_kib", "must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// What one run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: Report,
    pub timeline: UtilizationTimeline,
}

fn resolve(base_dir: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

/// Loads the trace a workload section names. Relative paths resolve
/// against `base_dir`; a name that is not a file may be a bundled trace.
pub fn load_workload(w: &WorkloadSection, base_dir: &Path) -> Result<Workload, Error> {
    let path = resolve(base_dir, &w.trace);
    if !path.exists() {
        if let Some(b) = Workload::bundled(&w.trace) {
            return Ok(b);
        }
    }
    Ok(Workload::load(&path)?)
}

fn load_schedule(path: &Path) -> Result<CollectiveSchedule, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::invalid("microbenchmark.schedule", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| ConfigError::invalid("microbenchmark.schedule", e.to_string()).into())
}

/// Runs the configured simulation.
pub fn execute(cfg: &RunConfig, base_dir: &Path) -> Result<RunOutput, Error> {
    cfg.validate()?;
    let topo = cfg.topology()?;
    let sys = cfg.system();
    let ecfg = cfg.engine_config();
    let hash = cfg.hash();
    if let Some(w) = &cfg.workload {
        let wl = load_workload(w, base_dir)?;
        let m = if w.dlrm_optimized {
            run_dlrm_optimized(&wl, &sys, &topo, &ecfg)?
        } else {
            run_training(&wl, &sys, &topo, &ecfg)?
        };
        let timeline = UtilizationTimeline {
            window_cycles: m.window_cycles,
            fractions: m.utilization.clone(),
        };
        return Ok(RunOutput {
            report: Report::from_training(&m, &hash, cfg.seed),
            timeline,
        });
    }
    let mb = cfg.microbenchmark.as_ref().expect("validated");
    let mut eng = Engine::new(ecfg, topo.clone())?;
    let (r, name) = match &mb.schedule {
        Some(p) => {
            let s = load_schedule(&resolve(base_dir, p))?;
            (eng.run(&mut CustomSchedule(Some(s)))?, format!("schedule:{p}"))
        }
        None => (
            eng.run(&mut SingleCollective {
                kind: mb.kind,
                payload_bytes: mb.payload_kib * KIB,
            })?,
            mb.kind.to_string(),
        ),
    };
    Ok(RunOutput {
        timeline: UtilizationTimeline::from_report(&r),
        report: Report::from_microbenchmark(&r, sys.kind.name(), &topo, &name, &hash, cfg.seed),
    })
}

/// Per-chunk schedules of every collective kind the run uses, as the
/// engine would replay them.
pub fn schedules_for_dump(cfg: &RunConfig, base_dir: &Path) -> Result<Vec<(String, CollectiveSchedule)>, Error> {
    let topo = cfg.topology()?;
    let eng = Engine::new(cfg.engine_config(), topo.clone())?;
    let mut kinds: Vec<CollectiveKind> = Vec::new();
    if let Some(w) = &cfg.workload {
        for l in load_workload(w, base_dir)?.layers {
            if l.comm_bytes > 0 && !kinds.contains(&l.comm_kind) {
                kinds.push(l.comm_kind);
            }
        }
    }
    if let Some(m) = &cfg.microbenchmark {
        if let Some(p) = &m.schedule {
            return Ok(vec![("custom".into(), load_schedule(&resolve(base_dir, p))?)]);
        }
        kinds.push(m.kind);
    }
    kinds.sort();
    Ok(kinds
        .into_iter()
        .map(|k| {
            let plan = ChunkPlan::new(eng.chunk_bytes_for(k)).with_message_bytes(eng.config().message_bytes);
            (k.to_string(), plan_collective(k, &topo, &plan, Dir::Up))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 3
system_config = "baseline_comp_opt"

[topology]
dims = "2x2x2"

[endpoint]
sm_comm = 4

[microbenchmark]
kind = "all_reduce"
payload_kib = 256
"#;

    #[test]
    fn defaults_follow_the_system_table() {
        let c = RunConfig::parse("[topology]\ndims = \"4x4x4\"\n[microbenchmark]\n").unwrap();
        let e = c.engine_config();
        assert_eq!(e.budget.mem_bw_total_gbps, 900.0);
        assert_eq!(e.budget.sm_total, 80);
        assert_eq!(e.ace.sram_bytes, 4 * MIB);
        assert_eq!(e.ace.fsm_count, 16);
        assert_eq!(e.ace.alu_count, 4);
        assert_eq!(c.topology.link, LinkParams::default());
        assert_eq!(c.system_config, SystemKind::Ace);
        assert_eq!(e.budget.mem_bw_comm_gbps, 128.0);
        c.validate().unwrap();
    }

    #[test]
    fn round_trip_is_identity() {
        let c = RunConfig::parse(SAMPLE).unwrap();
        let text = c.to_toml();
        let again = RunConfig::parse(&text).unwrap();
        assert_eq!(c, again);
        assert_eq!(text, again.to_toml());
    }

    #[test]
    fn overrides_apply_on_top_of_preset() {
        let c = RunConfig::parse(SAMPLE).unwrap();
        let s = c.system();
        assert_eq!(s.budget.sm_comm, 4);
        assert_eq!(s.budget.mem_bw_comm_gbps, 128.0);
    }

    #[test]
    fn missing_dims_names_the_key() {
        let c = RunConfig::parse("[microbenchmark]\n").unwrap();
        let e = c.validate().unwrap_err();
        assert_eq!(e.key(), "topology.dims");
        assert!(e.to_string().contains("topology.dims"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::parse("[topology]\ndims = \"2x2x2\"\nfoo = 1\n").unwrap_err();
        assert_eq!(e.key(), "foo");
        assert!(RunConfig::parse("bogus = 1\n").is_err());
    }

    #[test]
    fn exactly_one_thing_to_run() {
        let c = RunConfig::parse("[topology]\ndims = \"2x2x2\"\n").unwrap();
        assert_eq!(c.validate().unwrap_err().key(), "workload");
        let both = RunConfig::parse(
            "[topology]\ndims = \"2x2x2\"\n[workload]\ntrace = \"resnet50-like\"\n[microbenchmark]\n",
        )
        .unwrap();
        assert!(both.validate().is_err());
    }

    #[test]
    fn sweep_keys_edit_nested_values() {
        let c = RunConfig::parse(SAMPLE).unwrap();
        let d = c.with_key("topology.dims", "4x4x4").unwrap();
        assert_eq!(d.dims().unwrap(), Dims::new(4, 4, 4));
        let m = c.with_key("endpoint.mem_bw_comm_gbps", "450").unwrap();
        assert_eq!(m.system().budget.mem_bw_comm_gbps, 450.0);
        let s = c.with_key("system_config", "ideal").unwrap();
        assert_eq!(s.system_config, SystemKind::Ideal);
        assert!(c.with_key("endpoint.nope", "1").is_err());
    }

    #[test]
    fn microbenchmark_runs_and_is_reproducible() {
        let c = RunConfig::parse(SAMPLE).unwrap();
        let a = execute(&c, Path::new(".")).unwrap();
        let b = execute(&c, Path::new(".")).unwrap();
        assert_eq!(a.report.to_json(), b.report.to_json());
        assert_eq!(a.report.config_hash, c.hash());
        assert_eq!(a.report.seed, 3);
        assert!(a.report.iteration_cycles > 0);
    }
}
