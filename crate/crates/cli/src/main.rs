use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cmx_core::addr::PAGE_SIZE;
use cmx_core::config::{resolve_axis, Baseline, RunConfig};
use cmx_core::experiments::{ablate, load_workload, sweep};
use cmx_core::sim::{SimOutput, Simulator};
use cmx_core::snapshot::{describe, Snapshot};
use cmx_core::telemetry::{pagefault_analysis, PagefaultMode};
use cmx_core::workload::{generate, load_trace, save_trace, SyntheticSpec, Trace, TraceError};
use cmx_core::SimError;

#[derive(Parser)]
#[command(name = "cmx", version, about = "Compressed CXL memory expander simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; every key has a default.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set timing.channels=4` or `--set link_latency=140`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Trace file (text or binary); replaces the configured workload.
    #[arg(short, long)]
    trace: Option<PathBuf>,
    /// Payload blob for the trace; defaults to `<trace>.blob` when present.
    #[arg(long)]
    blob: Option<PathBuf>,
    #[arg(long, value_parser = ["ibex", "uncompressed"])]
    baseline: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one configuration.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
        /// Also write the final translation metadata to `<out>/meta.snap`.
        #[arg(long)]
        snapshot: bool,
    },
    /// One run per value of a config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Config key or alias (link_latency, decompress_cycles, compress_cycles,
        /// channels, write_probability, read_ratio, promoted_size).
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
    },
    /// base, +S, +S+C and +S+C+M on the same workload.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
    },
    /// Write the synthetic workload of a config as a trace file.
    GenTrace {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        out: PathBuf,
        /// Packed 24-byte records instead of text.
        #[arg(long)]
        binary: bool,
    },
    /// LRU page-fault counts with and without compression.
    Pagefault {
        #[command(flatten)]
        common: Common,
        /// Resident capacity in bytes.
        #[arg(long, conflicts_with = "fraction")]
        capacity: Option<u64>,
        /// Resident capacity as a fraction of the trace footprint.
        #[arg(long, default_value_t = 0.5)]
        fraction: f64,
    },
    /// Print a metadata snapshot written by `run --snapshot`.
    DumpMeta {
        snapshot: PathBuf,
        /// Only this OS page number (decimal or 0x-hex).
        #[arg(long)]
        ospn: Option<String>,
    },
}

enum Failure {
    Sim(SimError),
    Io(PathBuf, std::io::Error),
    Usage(String),
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Failure::Sim(e)
    }
}

impl From<TraceError> for Failure {
    fn from(e: TraceError) -> Self {
        Failure::Sim(e.into())
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Sim(SimError::Config(_)) | Failure::Usage(_) => 2,
            Failure::Sim(SimError::Trace(_)) => 3,
            Failure::Sim(SimError::CapacityExhausted { .. }) => 4,
            Failure::Sim(_) | Failure::Io(..) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Sim(e) => write!(f, "{e}"),
            Failure::Io(p, e) => write!(f, "{}: {e}", p.display()),
            Failure::Usage(m) => write!(f, "{m}"),
        }
    }
}

type Res<T> = Result<T, Failure>;

fn write(path: &Path, contents: &str) -> Res<()> {
    fs::write(path, contents).map_err(|e| Failure::Io(path.to_path_buf(), e))
}

fn mkdir(path: &Path) -> Res<()> {
    fs::create_dir_all(path).map_err(|e| Failure::Io(path.to_path_buf(), e))
}

/// Prints to stdout; a closed pipe (`| head`) is not an error.
fn out(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn config(c: &Common) -> Res<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p, &c.sets)?,
        None => RunConfig::from_toml("", &c.sets)?,
    };
    if let Some(t) = &c.trace {
        cfg.workload.trace = Some(t.clone());
        cfg.workload.blob = c.blob.clone();
        cfg.workload.synthetic = None;
    }
    if let Some(b) = &c.baseline {
        cfg.baseline = if b == "ibex" { Baseline::Ibex } else { Baseline::Uncompressed };
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(dir: &Path, res: &SimOutput) -> Res<()> {
    mkdir(dir)?;
    write(&dir.join("report.json"), &res.report.to_json())?;
    write(&dir.join("breakdown.csv"), &res.breakdown_csv)?;
    write(&dir.join("ratio.csv"), &res.ratio_csv)?;
    if let Some(log) = &res.event_log {
        write(&dir.join("events.csv"), log)?;
    }
    Ok(())
}

fn summary_line(name: &str, res: &SimOutput) -> String {
    let r = &res.report;
    format!(
        "{name}: {} requests, {} accesses ({} control), mean {:.1} ns, p99 {:.1} ns, ratio {}\n",
        r.requests,
        r.traffic.total,
        r.traffic.control,
        r.latency.mean_ns,
        r.latency.p99_ns,
        r.ratio.geomean.map_or("-".to_string(), |g| format!("{g:.3}"))
    )
}

fn combined(dir: &Path, name: &str, results: &[(String, SimOutput)]) -> Res<()> {
    mkdir(dir)?;
    let reports: Vec<_> = results.iter().map(|(_, o)| &o.report).collect();
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n";
    write(&dir.join(format!("{name}.json")), &json)?;
    let mut csv = String::from("label,requests,total_accesses,control_accesses,final_accesses,mean_ns,p50_ns,p99_ns,ratio\n");
    for (_, o) in results {
        let r = &o.report;
        csv.push_str(&format!(
            "{},{},{},{},{},{:.3},{:.3},{:.3},{}\n",
            r.label,
            r.requests,
            r.traffic.total,
            r.traffic.control,
            r.traffic.final_access,
            r.latency.mean_ns,
            r.latency.p50_ns,
            r.latency.p99_ns,
            r.ratio.geomean.map_or(String::new(), |g| format!("{g:.6}"))
        ));
    }
    write(&dir.join(format!("{name}.csv")), &csv)
}

fn dir_name(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.+=".contains(c) { c } else { '_' }).collect()
}

fn parse_ospn(s: &str) -> Res<u64> {
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    };
    r.map_err(|_| Failure::Usage(format!("bad page number `{s}`")))
}

fn real_main(cli: Cli) -> Res<()> {
    match cli.cmd {
        Cmd::Run { common, out: dir, snapshot } => {
            let cfg = config(&common)?;
            let trace = load_workload(&cfg)?;
            let mut sim = Simulator::new(&cfg)?;
            let res = sim.run(&trace)?;
            emit(&dir, &res)?;
            if snapshot {
                let engine = sim
                    .engine()
                    .ok_or_else(|| Failure::Usage("--snapshot needs the ibex baseline".into()))?;
                Snapshot::capture(engine)?.save(&dir.join("meta.snap"))?;
            }
            out(&summary_line("run", &res));
        }
        Cmd::Sweep { common, axis, values, out: dir } => {
            let cfg = config(&common)?;
            let trace = match load_workload(&cfg) {
                Ok(t) => Some(t),
                Err(SimError::Config(_)) if resolve_axis(&axis).starts_with("workload.") => None,
                Err(e) => return Err(e.into()),
            };
            let results = sweep(&cfg, &axis, &values, trace.as_ref())?;
            for (v, o) in &results {
                let label = format!("{axis}={v}");
                emit(&dir.join(dir_name(&label)), o)?;
                out(&summary_line(&label, o));
            }
            combined(&dir, "sweep", &results)?;
        }
        Cmd::Ablate { common, out: dir } => {
            let cfg = config(&common)?;
            let trace = load_workload(&cfg)?;
            let results = ablate(&cfg, &trace)?;
            for (name, o) in &results {
                emit(&dir.join(dir_name(name)), o)?;
                out(&summary_line(name, o));
            }
            combined(&dir, "ablation", &results)?;
        }
        Cmd::GenTrace { common, out: path, binary } => {
            let cfg = config(&common)?;
            let spec: SyntheticSpec = cfg.workload.synthetic.clone().unwrap_or_default();
            let trace = generate(&spec)?;
            save_trace(&trace, &path, binary)?;
            out(&format!("wrote {} records to {}\n", trace.len(), path.display()));
        }
        Cmd::Pagefault { common, capacity, fraction } => {
            let cfg = config(&common)?;
            let trace: Trace = match &common.trace {
                Some(p) => load_trace(p, common.blob.as_deref())?,
                None => load_workload(&cfg)?,
            };
            if fraction <= 0.0 || !fraction.is_finite() {
                return Err(Failure::Usage("--fraction must be positive".into()));
            }
            let footprint = trace.records.iter().map(|r| r.ospa.ospn()).collect::<HashSet<_>>().len() as u64;
            let cap = capacity.unwrap_or(((footprint * PAGE_SIZE) as f64 * fraction) as u64);
            let base = pagefault_analysis(&trace, cap, PagefaultMode::Uncompressed)?;
            let ibex = pagefault_analysis(&trace, cap, PagefaultMode::Ibex)?;
            let json = serde_json::json!({
                "footprint_pages": footprint,
                "capacity_bytes": cap,
                "uncompressed": base,
                "ibex": ibex,
            });
            out(&(serde_json::to_string_pretty(&json).expect("json") + "\n"));
        }
        Cmd::DumpMeta { snapshot, ospn } => {
            let s = Snapshot::load(&snapshot)?;
            let only = ospn.as_deref().map(parse_ospn).transpose()?;
            let mut text = format!("format={} entries={}\n", s.format.name(), s.entries.len());
            for (o, e) in &s.entries {
                if only.is_none_or(|x| x == *o) {
                    text.push_str(&describe(*o, e));
                    text.push('\n');
                }
            }
            if let Some(x) = only.filter(|x| !s.entries.iter().any(|(o, _)| o == x)) {
                text.push_str(&describe(x, &Default::default()));
                text.push('\n');
            }
            out(&text);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
