//! `isoguard`: generate transactional histories, check them offline or
//! online against snapshot isolation and serializability, and inject faults.
//!
//! Exit codes: 0 = checked clean (or non-checking command succeeded),
//! 1 = violations found, 2 = usage, i/o, or validation failure.
//!
//! Reports are JSON on stdout (schema `isoguard/1`); logs go to stderr. A
//! `--config` TOML file supplies defaults for any flag not given on the
//! command line, section per subcommand.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use isoguard_core::aion::{CheckMode, GcTrigger, OnlineConfig};
use isoguard_core::chronos::{self, GcPolicy};
use isoguard_core::harness::{run_online, DeliverySchedule, RunOptions, ScheduleParams, TimeMode};
use isoguard_core::history::{History, ValidatedHistory};
use isoguard_core::oracle;
use isoguard_core::report::Report;
use isoguard_core::workload::{self, FaultKind, FaultSpec, KeyDist, WorkloadParams};

const SCHEMA: &str = "isoguard/1";
const SPILL_DIR_ENV: &str = "ISOGUARD_SPILL_DIR";

#[derive(Parser)]
#[command(name = "isoguard", version, about = "Timestamp-based transactional isolation checking")]
struct Cli {
    /// TOML file with per-subcommand default values for these flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a history by simulating a snapshot-isolated store.
    Generate(GenerateArgs),
    /// Check a history file offline.
    Check(CheckArgs),
    /// Replay a history file through the online checker under simulated
    /// delivery asynchrony.
    CheckOnline(CheckOnlineArgs),
    /// Perturb a history with faults, keeping it structurally valid.
    Inject(InjectArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Si,
    Ser,
}

impl From<ModeArg> for CheckMode {
    fn from(m: ModeArg) -> CheckMode {
        match m {
            ModeArg::Si => CheckMode::Si,
            ModeArg::Ser => CheckMode::Ser,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EngineArg {
    Chronos,
    Oracle,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DistArg {
    Uniform,
    Zipf,
    Hotspot,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FaultArg {
    PerturbStart,
    PerturbCommit,
    CorruptRead,
    ForceConflict,
}

impl From<FaultArg> for FaultKind {
    fn from(f: FaultArg) -> FaultKind {
        match f {
            FaultArg::PerturbStart => FaultKind::PerturbStartTs,
            FaultArg::PerturbCommit => FaultKind::PerturbCommitTs,
            FaultArg::CorruptRead => FaultKind::CorruptReadValue,
            FaultArg::ForceConflict => FaultKind::ForceWriteConflict,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    sessions: Option<u64>,
    #[arg(long)]
    txns: Option<u64>,
    /// Operations per transaction.
    #[arg(long)]
    ops: Option<u32>,
    /// Fraction of operations that are reads.
    #[arg(long)]
    reads: Option<f64>,
    #[arg(long)]
    keys: Option<u64>,
    #[arg(long, value_enum)]
    dist: Option<DistArg>,
    /// Zipfian exponent (with --dist zipf).
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output history file.
    #[arg(long)]
    out: PathBuf,
    /// Print generation statistics as JSON on stdout.
    #[arg(long)]
    stats: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct GenerateDefaults {
    sessions: Option<u64>,
    txns: Option<u64>,
    ops: Option<u32>,
    reads: Option<f64>,
    keys: Option<u64>,
    dist: Option<String>,
    theta: Option<f64>,
    seed: Option<u64>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    engine: Option<EngineArg>,
    /// Offline GC policy: `never` or `every:N`.
    #[arg(long)]
    gc: Option<String>,
    /// History file to check.
    path: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct CheckDefaults {
    mode: Option<String>,
    engine: Option<String>,
    gc: Option<String>,
}

#[derive(Args)]
struct CheckOnlineArgs {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Delay before an external-read verdict becomes final.
    #[arg(long)]
    timeout_ms: Option<u64>,
    /// Mean injected delivery delay, milliseconds.
    #[arg(long)]
    mu: Option<f64>,
    /// Standard deviation of the injected delay, milliseconds.
    #[arg(long)]
    sigma: Option<f64>,
    /// Collector batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Wire interval between transactions, microseconds.
    #[arg(long)]
    inter_us: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Online GC trigger: `never`, `threshold:N`, or `hardcap:N` resident
    /// transactions.
    #[arg(long)]
    gc: Option<String>,
    /// Spill directory (also settable via ISOGUARD_SPILL_DIR).
    #[arg(long)]
    spill_dir: Option<PathBuf>,
    /// Drive the checker on the schedule's virtual clock; pass `false` for
    /// wall-clock throughput measurement.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set, value_name = "BOOL")]
    virtual_time: bool,
    /// Write the raw checker event stream as JSON lines.
    #[arg(long, value_name = "FILE")]
    event_log: Option<PathBuf>,
    /// History file to replay.
    path: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct CheckOnlineDefaults {
    mode: Option<String>,
    timeout_ms: Option<u64>,
    mu: Option<f64>,
    sigma: Option<f64>,
    batch: Option<usize>,
    inter_us: Option<u64>,
    seed: Option<u64>,
    gc: Option<String>,
    spill_dir: Option<PathBuf>,
}

#[derive(Args)]
struct InjectArgs {
    #[arg(long, value_enum)]
    fault: FaultArg,
    /// Fraction of eligible transactions to perturb, in (0, 1].
    #[arg(long)]
    rate: Option<f64>,
    /// Tick delta bound for timestamp faults.
    #[arg(long)]
    magnitude: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Input history file.
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Print injection statistics as JSON on stdout.
    #[arg(long)]
    stats: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct InjectDefaults {
    rate: Option<f64>,
    magnitude: Option<u64>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct ConfigFile {
    #[serde(default)]
    generate: GenerateDefaults,
    #[serde(default)]
    check: CheckDefaults,
    #[serde(default)]
    check_online: CheckOnlineDefaults,
    #[serde(default)]
    inject: InjectDefaults,
}

/// Anything that should terminate with exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl<E: std::error::Error> From<E> for UsageError {
    fn from(e: E) -> UsageError {
        let mut msg = e.to_string();
        let mut src = e.source();
        while let Some(s) = src {
            msg.push_str(&format!(": {s}"));
            src = s.source();
        }
        UsageError(msg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let config = match load_config(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("isoguard: {e}");
            return ExitCode::from(2);
        }
    };
    let outcome = match cli.command {
        Command::Generate(args) => cmd_generate(args, config.generate),
        Command::Check(args) => cmd_check(args, config.check),
        Command::CheckOnline(args) => cmd_check_online(args, config.check_online),
        Command::Inject(args) => cmd_inject(args, config.inject),
    };
    match outcome {
        Ok(clean) => ExitCode::from(if clean { 0 } else { 1 }),
        Err(e) => {
            eprintln!("isoguard: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&std::path::Path>) -> Result<ConfigFile, UsageError> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Ok(toml::from_str(&text)?)
        }
    }
}

fn parse_history(path: &std::path::Path) -> Result<ValidatedHistory, UsageError> {
    let file = File::open(path)?;
    let h = History::parse(BufReader::new(file))?;
    h.validate().map_err(|errors| {
        let lines: Vec<String> = errors.iter().map(|e| format!("  {e}")).collect();
        UsageError(format!("{} is not a well-formed history:\n{}", path.display(), lines.join("\n")))
    })
}

fn parse_mode(cli: Option<ModeArg>, cfg: Option<&str>) -> Result<CheckMode, UsageError> {
    match (cli, cfg) {
        (Some(m), _) => Ok(m.into()),
        (None, Some("si")) => Ok(CheckMode::Si),
        (None, Some("ser")) => Ok(CheckMode::Ser),
        (None, Some(other)) => Err(UsageError(format!("unknown mode {other:?} in config"))),
        (None, None) => Ok(CheckMode::Si),
    }
}

fn parse_offline_gc(s: Option<&str>) -> Result<GcPolicy, UsageError> {
    match s {
        None | Some("never") => Ok(GcPolicy::Never),
        Some(other) => match other.strip_prefix("every:").and_then(|n| n.parse::<usize>().ok()) {
            Some(n) if n >= 1 => Ok(GcPolicy::EveryNTxns(n)),
            _ => Err(UsageError(format!("bad gc policy {other:?}: expected never or every:N"))),
        },
    }
}

fn parse_online_gc(s: Option<&str>) -> Result<GcTrigger, UsageError> {
    let parse_n = |tail: Option<&str>| tail.and_then(|n| n.parse::<usize>().ok()).filter(|&n| n >= 1);
    match s {
        None | Some("never") => Ok(GcTrigger::Never),
        Some(other) => {
            if let Some(n) = parse_n(other.strip_prefix("threshold:")) {
                Ok(GcTrigger::Threshold { resident_max: n })
            } else if let Some(n) = parse_n(other.strip_prefix("hardcap:")) {
                Ok(GcTrigger::HardCap { resident_max: n })
            } else {
                Err(UsageError(format!(
                    "bad gc trigger {other:?}: expected never, threshold:N, or hardcap:N"
                )))
            }
        }
    }
}

fn cmd_generate(args: GenerateArgs, def: GenerateDefaults) -> Result<bool, UsageError> {
    let base = WorkloadParams::default();
    let theta = args.theta.or(def.theta).unwrap_or(KeyDist::DEFAULT_THETA);
    let dist = match args.dist {
        Some(DistArg::Uniform) => KeyDist::Uniform,
        Some(DistArg::Zipf) => KeyDist::Zipfian { theta },
        Some(DistArg::Hotspot) => KeyDist::Hotspot,
        None => match def.dist.as_deref() {
            None | Some("zipf") => KeyDist::Zipfian { theta },
            Some("uniform") => KeyDist::Uniform,
            Some("hotspot") => KeyDist::Hotspot,
            Some(other) => return Err(UsageError(format!("unknown dist {other:?} in config"))),
        },
    };
    let params = WorkloadParams {
        sessions: args.sessions.or(def.sessions).unwrap_or(base.sessions),
        txns: args.txns.or(def.txns).unwrap_or(base.txns),
        ops_per_txn: args.ops.or(def.ops).unwrap_or(base.ops_per_txn),
        read_ratio: args.reads.or(def.reads).unwrap_or(base.read_ratio),
        keys: args.keys.or(def.keys).unwrap_or(base.keys),
        dist,
        seed: args.seed.or(def.seed).unwrap_or(0),
    };
    let (history, stats) = workload::generate(&params)?;
    let mut out = BufWriter::new(File::create(&args.out)?);
    history.write_canonical(&mut out)?;
    out.flush()?;
    log::info!(
        "wrote {} transactions to {} ({} aborts, {} retries, {} dropped)",
        stats.committed,
        args.out.display(),
        stats.aborts,
        stats.retries,
        stats.dropped
    );
    if args.stats {
        let payload = json!({ "schema": SCHEMA, "stats": stats });
        println!("{}", serde_json::to_string_pretty(&payload).expect("stats serialize"));
    }
    Ok(true)
}

fn report_json(mode: CheckMode, report: &Report) -> String {
    let payload = json!({
        "schema": SCHEMA,
        "mode": match mode { CheckMode::Si => "si", CheckMode::Ser => "ser" },
        "summary": report.summary(),
        "violations": report.violations(),
    });
    serde_json::to_string_pretty(&payload).expect("report serialize")
}

fn cmd_check(args: CheckArgs, def: CheckDefaults) -> Result<bool, UsageError> {
    let mode = parse_mode(args.mode, def.mode.as_deref())?;
    let gc = parse_offline_gc(args.gc.as_deref().or(def.gc.as_deref()))?;
    let engine = match (args.engine, def.engine.as_deref()) {
        (Some(e), _) => e,
        (None, Some("oracle")) => EngineArg::Oracle,
        (None, Some("chronos")) | (None, None) => EngineArg::Chronos,
        (None, Some(other)) => return Err(UsageError(format!("unknown engine {other:?} in config"))),
    };
    let history = parse_history(&args.path)?;
    let report = match (engine, mode) {
        (EngineArg::Chronos, CheckMode::Si) => chronos::check_si(&history, gc),
        (EngineArg::Chronos, CheckMode::Ser) => chronos::check_ser(&history, gc),
        (EngineArg::Oracle, CheckMode::Si) => oracle::check_si(&history),
        (EngineArg::Oracle, CheckMode::Ser) => oracle::check_ser(&history),
    };
    println!("{}", report_json(mode, &report));
    Ok(report.is_clean())
}

fn cmd_check_online(args: CheckOnlineArgs, def: CheckOnlineDefaults) -> Result<bool, UsageError> {
    let mode = parse_mode(args.mode, def.mode.as_deref())?;
    let gc = parse_online_gc(args.gc.as_deref().or(def.gc.as_deref()))?;
    let spill_dir = args
        .spill_dir
        .or(def.spill_dir)
        .or_else(|| std::env::var_os(SPILL_DIR_ENV).map(PathBuf::from));
    if matches!(gc, GcTrigger::Threshold { .. } | GcTrigger::HardCap { .. }) && spill_dir.is_none()
    {
        return Err(UsageError(format!(
            "online gc needs a spill directory (--spill-dir or ${SPILL_DIR_ENV})"
        )));
    }
    let history = parse_history(&args.path)?;
    let sched_params = ScheduleParams {
        mu_ms: args.mu.or(def.mu).unwrap_or(100.0),
        sigma_ms: args.sigma.or(def.sigma).unwrap_or(10.0),
        batch: args.batch.or(def.batch).unwrap_or(500),
        inter_us: args.inter_us.or(def.inter_us).unwrap_or(2_000),
        seed: args.seed.or(def.seed).unwrap_or(0),
    };
    let schedule = DeliverySchedule::build(&history, &sched_params);
    let config = OnlineConfig {
        mode,
        timeout_ms: args.timeout_ms.or(def.timeout_ms).unwrap_or(5_000),
        gc,
        spill_dir,
    };
    let opts = RunOptions {
        time: if args.virtual_time { TimeMode::Virtual } else { TimeMode::WallClock },
        keep_events: args.event_log.is_some(),
    };
    let run = run_online(&history, &schedule, config, &opts)?;
    if let Some(path) = &args.event_log {
        let mut f = BufWriter::new(File::create(path)?);
        for ev in run.events.as_deref().unwrap_or_default() {
            serde_json::to_writer(&mut f, ev)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    let payload = json!({
        "schema": SCHEMA,
        "mode": match mode { CheckMode::Si => "si", CheckMode::Ser => "ser" },
        "summary": run.report.summary(),
        "violations": run.report.violations(),
        "flip_flops": {
            "flipped_txns": run.flips.flipped_txns,
            "flipped_pairs": run.flips.flipped_pairs,
            "total_flips": run.flips.total_flips,
            "histogram": run.flips.histogram,
            "unrectified_pairs": run.flips.unrectified_pairs,
            "rectification_latency_us": {
                "p50": run.flips.latency_percentile_us(50.0),
                "p95": run.flips.latency_percentile_us(95.0),
                "p99": run.flips.latency_percentile_us(99.0),
            },
        },
        "throughput": {
            "tps": run.tps,
            "duration_us": run.duration_us,
            "inversions": schedule.inversions(&history),
            "trace": run.trace.iter().map(|&(sec, n)| json!({"sec": sec, "txns": n})).collect::<Vec<_>>(),
        },
    });
    println!("{}", serde_json::to_string_pretty(&payload).expect("report serialize"));
    Ok(run.report.is_clean())
}

fn cmd_inject(args: InjectArgs, def: InjectDefaults) -> Result<bool, UsageError> {
    let history = parse_history(&args.input)?;
    let spec = FaultSpec {
        kind: args.fault.into(),
        rate: args.rate.or(def.rate).unwrap_or(0.05),
        magnitude: args.magnitude.or(def.magnitude).unwrap_or(10),
        seed: args.seed.or(def.seed).unwrap_or(0),
    };
    let (out_history, stats) = workload::inject_faults(&history, &spec)?;
    let mut out = BufWriter::new(File::create(&args.out)?);
    out_history.write_canonical(&mut out)?;
    out.flush()?;
    log::info!(
        "{}: selected {} transactions, mutated {}",
        args.out.display(),
        stats.selected,
        stats.applied
    );
    if args.stats {
        let payload = json!({ "schema": SCHEMA, "stats": stats });
        println!("{}", serde_json::to_string_pretty(&payload).expect("stats serialize"));
    }
    Ok(true)
}
