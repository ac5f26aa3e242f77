use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use collfab::analytics::{emit_report, ReportFormat};
use collfab::config::{execute, schedules_for_dump, RunConfig, RunOutput};
use collfab::oracle;
use collfab::{ConfigError, Deadlock, Error};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "collfab", version, about = "Collective communication fabric simulator")]
struct Cli {
    /// Also write the per-chunk step schedule of each collective used.
    #[arg(long, global = true)]
    dump_schedule: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one simulation and write its reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `output.dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the cartesian product of the given axes.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// KEY=V1,V2,... over a dotted config key; repeatable.
        #[arg(long)]
        axis: Vec<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare every planner against the direct definition on small tori.
    OracleCheck {
        #[arg(long, default_value_t = 16)]
        max_nodes: usize,
        #[arg(long, default_value_t = 50)]
        vectors: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Swap in a broken planner to see the check fail.
        #[arg(long, hide = true)]
        mutate: Option<String>,
    },
    /// Parse and check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Exit status for each way a command can fail.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Deadlock>().is_some() {
            return 3;
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Deadlock(_) => 3,
                Error::Config(_) | Error::Trace(_) | Error::Schedule(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn write_outputs(cfg: &RunConfig, base: &Path, out: &RunOutput, dir: &Path, dump: bool) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    emit_report(&out.report, &out.timeline, ReportFormat::Json, &dir.join(&cfg.output.report))?;
    emit_report(&out.report, &out.timeline, ReportFormat::Csv, &dir.join(&cfg.output.timeline))?;
    if dump {
        for (name, s) in schedules_for_dump(cfg, base)? {
            std::fs::write(dir.join(format!("schedule.{name}.jsonl")), s.dump_jsonl())?;
        }
    }
    Ok(())
}

fn report_deadlock(e: &Error) {
    if let Error::Deadlock(d) = e {
        eprintln!("{d}");
        for b in &d.blocked {
            eprintln!("  blocked: {b}");
        }
    }
}

fn cmd_run(config: &Path, out: Option<PathBuf>, dump: bool) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let base = base_dir(config);
    let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    let result = execute(&cfg, &base).inspect_err(report_deadlock)?;
    write_outputs(&cfg, &base, &result, &dir, dump)?;
    let r = &result.report;
    println!(
        "{} {} {}: {} cycles, {} exposed, {:.1} GB/s",
        r.system, r.dims, r.workload, r.iteration_cycles, r.exposed_comm_cycles, r.effective_network_gbps
    );
    Ok(())
}

type Axis = (String, Vec<String>);

fn parse_axis(s: &str) -> anyhow::Result<Axis> {
    let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("axis `{s}` is not KEY=V1,V2"))?;
    let vals: Vec<String> = v.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect();
    if vals.is_empty() {
        bail!(ConfigError::invalid(k, "axis has no values"));
    }
    Ok((k.trim().to_string(), vals))
}

/// Every combination of axis values, first axis varying slowest.
fn cartesian(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    let mut points = vec![Vec::new()];
    for (k, vals) in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                vals.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((k.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

fn cmd_sweep(config: &Path, axes: &[String], jobs: usize, out: Option<PathBuf>, dump: bool) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let base = base_dir(config);
    let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    let axes: Vec<Axis> = axes.iter().map(|a| parse_axis(a)).collect::<anyhow::Result<_>>()?;
    let points = cartesian(&axes);
    let configs: Vec<RunConfig> = points
        .iter()
        .map(|p| p.iter().try_fold(cfg.clone(), |c, (k, v)| c.with_key(k, v)))
        .collect::<Result<_, _>>()?;
    for c in &configs {
        c.validate()?;
    }
    log::info!("sweeping {} point(s) on {} worker(s)", configs.len(), jobs.max(1));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let results: Vec<anyhow::Result<RunOutput>> = pool.install(|| {
        configs
            .par_iter()
            .enumerate()
            .map(|(i, c)| {
                let r = execute(c, &base).inspect_err(report_deadlock)?;
                write_outputs(c, &base, &r, &dir.join(format!("point-{i:03}")), dump)?;
                Ok(r)
            })
            .collect()
    });
    let mut csv = String::from("point");
    for (k, _) in &axes {
        csv.push(',');
        csv.push_str(k);
    }
    csv.push_str(",system,dims,workload,iteration_cycles,total_compute_cycles,exposed_comm_cycles,effective_network_gbps,mean_utilization,config_hash\n");
    for (i, (p, r)) in points.iter().zip(results).enumerate() {
        let r = r?.report;
        csv.push_str(&format!("{i}"));
        for (_, v) in p {
            csv.push(',');
            csv.push_str(v);
        }
        csv.push_str(&format!(
            ",{},{},{},{},{},{},{:.3},{:.6},{}\n",
            r.system,
            r.dims,
            r.workload,
            r.iteration_cycles,
            r.total_compute_cycles,
            r.exposed_comm_cycles,
            r.effective_network_gbps,
            r.mean_utilization,
            r.config_hash
        ));
    }
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("sweep.csv"), csv)?;
    println!("{} point(s) written to {}", points.len(), dir.display());
    Ok(())
}

fn cmd_oracle(max_nodes: usize, vectors: usize, seed: u64, mutate: Option<&str>, dump: bool) -> anyhow::Result<bool> {
    let planner: &oracle::Planner = match mutate {
        None => &oracle::default_planner,
        Some("wrong-segment") => &oracle::wrong_segment_planner,
        Some(m) => bail!("unknown mutation `{m}`"),
    };
    match oracle::check(max_nodes, vectors, seed, planner) {
        Ok(s) => {
            println!("ok: {} schedules, {} vectors", s.schedules, s.vectors);
            Ok(true)
        }
        Err(c) => {
            eprintln!("mismatch: {c}");
            println!("{}", serde_json::to_string_pretty(&*c)?);
            if dump {
                let topo = collfab::topology::Topology::build_torus(c.dims.parse()?, &Default::default())?;
                let plan = collfab::collectives::ChunkPlan::new(c.payload_bytes).with_message_bytes(2);
                print!("{}", planner(c.kind, &topo, &plan, c.dir).dump_jsonl());
            }
            Ok(false)
        }
    }
}

fn cmd_validate(config: &Path, dump: bool) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    cfg.validate()?;
    println!("ok {}", cfg.hash());
    if dump {
        for (name, s) in schedules_for_dump(&cfg, &base_dir(config))? {
            println!("# {name}");
            print!("{}", s.dump_jsonl());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COLLFAB_LOG", "warn")).init();
    let cli = Cli::parse();
    let dump = cli.dump_schedule;
    let result = match cli.cmd {
        Cmd::Run { config, out } => cmd_run(&config, out, dump),
        Cmd::Sweep { config, axis, jobs, out } => cmd_sweep(&config, &axis, jobs, out, dump),
        Cmd::OracleCheck {
            max_nodes,
            vectors,
            seed,
            mutate,
        } => match cmd_oracle(max_nodes, vectors, seed, mutate.as_deref(), dump) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Cmd::Validate { config } => cmd_validate(&config, dump),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
