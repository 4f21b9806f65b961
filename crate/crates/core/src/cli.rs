//! Command-line front end. [`run`] is the whole program minus logger setup so
//! tests can drive it in-process.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::bundled;
use crate::energy::{
    affine_total, category_breakdown, member_breakdown, power_scatter, suite_total, wallclock_breakdown,
    write_breakdown_csv, BreakdownOptions, PUBLISHED_TOTAL_2_22_KJ,
};
use crate::exec::{execute, ExecOptions, JobStatus, LocalProcessBackend, StubJob, DEFAULT_COMPUTE_CEILING_S, DEFAULT_DESK_SCALE};
use crate::model::{EnsembleConfig, JobCategory, MemberKind, SuiteModel};
use crate::profile::{
    load_measurements, merge_all, read_io_profile, read_mpi_profile, IoMode, Phase, UnifiedJobProfile,
    DEFAULT_RESOLUTION_THRESHOLD_S,
};
use crate::schedule::{generate_schedule, scale_schedule, ScheduleDocument};
use crate::sim::{simulate, utilization, NodeLimit, Policy};
use crate::whatif::{apply_scenario, energy_savings, max_speedup, path_time, Scenario, WhatIfError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "epsim", version, about = "Workload, energy and scheduling model of an ensemble forecast suite")]
pub struct Cli {
    /// Increase log verbosity (repeatable)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge profiler files into unified job profiles (.kjp)
    Ingest(IngestArgs),
    /// Build a suite model from a measurement table and an edges file
    Model(ModelArgs),
    /// Energy and wall-clock breakdowns, power scatter export
    Report(ReportArgs),
    /// Discrete-event simulation of the expanded suite
    Simulate(SimulateArgs),
    /// Apply a scenario and tabulate speedup bounds and savings
    Whatif(WhatifArgs),
    /// Generate a schedule document (.kjs)
    Schedule(ScheduleArgs),
    /// Run a schedule document as desk-scale stub jobs
    Execute(ExecuteArgs),
    #[command(hide = true)]
    Stub(StubArgs),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Table,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PathSel {
    Control,
    Perturbed,
    Both,
}

#[derive(Debug, Args)]
pub struct ModelSource {
    /// Suite model JSON, or "bundled" for the reference suite
    #[arg(long, value_name = "FILE", default_value = "bundled")]
    pub model: String,
    /// Number of control members (overrides the model)
    #[arg(short = 'n', value_name = "n")]
    pub n_control: Option<u32>,
    /// Total number of members (overrides the model)
    #[arg(short = 'N', value_name = "N")]
    pub n_total: Option<u32>,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Scenario JSON file; inline flags are applied after it
    #[arg(long, value_name = "FILE")]
    pub scenario: Option<PathBuf>,
    /// Wall-clock divisor for a category, e.g. Forecast=2 (repeatable)
    #[arg(long, value_name = "CAT=F", value_parser = parse_category_value)]
    pub speedup: Vec<(JobCategory, f64)>,
    /// Energy multiplier for a category, e.g. DataAssimilation=0.5 (repeatable)
    #[arg(long, value_name = "CAT=F", value_parser = parse_category_value)]
    pub energy_factor: Vec<(JobCategory, f64)>,
    /// Target number of control members
    #[arg(long = "n-prime", value_name = "n")]
    pub n_prime: Option<u32>,
    /// Target total number of members
    #[arg(long = "N-prime", value_name = "N")]
    pub total_prime: Option<u32>,
    /// Multiplier on IO byte counts
    #[arg(long, value_name = "F")]
    pub io_scale: Option<f64>,
    /// Multiplier on compute durations
    #[arg(long, value_name = "F")]
    pub compute_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// mpiprof v1 file (repeatable)
    #[arg(long, value_name = "FILE")]
    pub mpi: Vec<PathBuf>,
    /// ioprof v1 file from a parallel run (repeatable)
    #[arg(long, value_name = "FILE")]
    pub io: Vec<PathBuf>,
    /// ioprof v1 file from a single-process run (repeatable)
    #[arg(long, value_name = "FILE")]
    pub io_single: Vec<PathBuf>,
    /// Directory receiving one <job>.kjp per job
    #[arg(short, long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Output format
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Measurement table CSV [default: the bundled table]
    #[arg(long, value_name = "FILE")]
    pub measurements: Option<PathBuf>,
    /// Dependency edges JSON [default: bundled edges when no table is given]
    #[arg(long, value_name = "FILE")]
    pub edges: Option<PathBuf>,
    /// Number of control members
    #[arg(short = 'n', value_name = "n")]
    pub n_control: Option<u32>,
    /// Total number of members
    #[arg(short = 'N', value_name = "N")]
    pub n_total: Option<u32>,
    /// Wall-clock below which energy readings are flagged low-confidence, in s
    #[arg(long, value_name = "S", default_value_t = DEFAULT_RESOLUTION_THRESHOLD_S)]
    pub resolution: f64,
    /// Output file [default: stdout]
    #[arg(short, long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub source: ModelSource,
    /// Compute category fractions over the non-Forecast total
    #[arg(long)]
    pub exclude_forecast: bool,
    /// Leave out jobs measured on the shared queue
    #[arg(long)]
    pub exclude_contaminated: bool,
    /// Write the power scatter (with iso-power and idle lines) as CSV
    #[arg(long, value_name = "FILE")]
    pub scatter_out: Option<PathBuf>,
    /// Iso-power reference line in kW (repeatable)
    #[arg(long, value_name = "KW", default_values_t = [1.0, 2.0, 5.0])]
    pub iso_power: Vec<f64>,
    /// Write the category breakdown as CSV
    #[arg(long, value_name = "FILE")]
    pub breakdown_out: Option<PathBuf>,
    /// Output format
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub source: ModelSource,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Node pool: "unlimited" or a node count
    #[arg(long, value_name = "unlimited|K", default_value = "unlimited", value_parser = parse_nodes)]
    pub nodes: NodeLimit,
    /// Write the event log as CSV
    #[arg(long, value_name = "FILE")]
    pub events_out: Option<PathBuf>,
    /// Output format
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct WhatifArgs {
    #[command(flatten)]
    pub source: ModelSource,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Report the speedup bound for this category only
    #[arg(long, value_name = "CAT")]
    pub zero_category: Option<JobCategory>,
    /// Member path(s) for the speedup bounds
    #[arg(long, value_enum, default_value = "both")]
    pub path: PathSel,
    /// Output format
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[command(flatten)]
    pub source: ModelSource,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Unified profile (.kjp) (repeatable) [default: bundled sample profiles]
    #[arg(long, value_name = "FILE")]
    pub profile: Vec<PathBuf>,
    /// Output schedule document
    #[arg(short, long, value_name = "FILE")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExecuteArgs {
    /// Schedule document (.kjs)
    pub schedule: PathBuf,
    /// Maximum number of concurrently running jobs
    #[arg(long, value_name = "K", default_value_t = 4)]
    pub parallelism: usize,
    /// Scratch directory [default: $EPSIM_SCRATCH or the system temp dir]
    #[arg(long, value_name = "DIR")]
    pub workdir: Option<PathBuf>,
    /// Divisor applied to compute durations
    #[arg(long, value_name = "F", default_value_t = DEFAULT_DESK_SCALE)]
    pub desk_scale: f64,
    /// Per-phase compute ceiling in seconds after desk scaling
    #[arg(long, value_name = "S", default_value_t = DEFAULT_COMPUTE_CEILING_S)]
    pub ceiling: f64,
    /// Keep scratch files after a successful run
    #[arg(long)]
    pub keep_scratch: bool,
    /// Multiplier on IO byte counts before running
    #[arg(long, value_name = "F", default_value_t = 1.0)]
    pub io_scale: f64,
    /// Multiplier on compute durations before running
    #[arg(long, value_name = "F", default_value_t = 1.0)]
    pub compute_scale: f64,
    /// Write the run log (with timestamps) as JSON
    #[arg(long, value_name = "FILE")]
    pub log_out: Option<PathBuf>,
    /// Output format
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct StubArgs {
    #[arg(long)]
    pub job: PathBuf,
    #[arg(long)]
    pub scratch: PathBuf,
}

fn parse_category_value(s: &str) -> Result<(JobCategory, f64), String> {
    let (c, v) = s.split_once('=').ok_or_else(|| format!("expected CATEGORY=VALUE, got '{s}'"))?;
    let v: f64 = v.trim().parse().map_err(|_| format!("'{v}' is not a number"))?;
    Ok((c.parse()?, v))
}

fn parse_nodes(s: &str) -> Result<NodeLimit, String> {
    if s.eq_ignore_ascii_case("unlimited") {
        return Ok(NodeLimit::Unlimited);
    }
    match s.parse::<u32>() {
        Ok(k) if k > 0 => Ok(NodeLimit::Nodes(k)),
        _ => Err(format!("expected 'unlimited' or a positive node count, got '{s}'")),
    }
}

/// Marks an error as a usage error (exit code 2).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

type CliResult = anyhow::Result<i32>;

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args_vec: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args_vec) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                if !text.contains("Usage:") {
                    let _ = writeln!(err, "\n{}", usage_for(&args_vec));
                }
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    if cli.verbose > 0 {
        log::set_max_level(if cli.verbose > 1 { log::LevelFilter::Debug } else { log::LevelFilter::Info });
    }
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a, out),
        Command::Model(a) => cmd_model(a, out, err),
        Command::Report(a) => cmd_report(a, out, err),
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Whatif(a) => cmd_whatif(a, out),
        Command::Schedule(a) => cmd_schedule(a, out),
        Command::Execute(a) => cmd_execute(a, out, err),
        Command::Stub(a) => cmd_stub(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            if let Some(u) = e.downcast_ref::<Usage>() {
                let _ = writeln!(err, "error: {u}\n\n{}\n\nFor more information, try '--help'.", usage_for(&args_vec));
                EXIT_USAGE
            } else {
                let _ = writeln!(err, "error: {e:#}");
                EXIT_INVALID
            }
        }
    }
}

/// Usage line of the subcommand named in `args`, else of the program.
fn usage_for(args: &[OsString]) -> String {
    let mut cmd = <Cli as clap::CommandFactory>::command();
    cmd.build();
    let sub = args.iter().skip(1).find_map(|a| cmd.find_subcommand(a).map(|s| s.get_name().to_string()));
    match sub.and_then(|s| cmd.find_subcommand_mut(&s).map(|c| c.render_usage())) {
        Some(u) => u.to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn ensemble_override(base: EnsembleConfig, n: Option<u32>, total: Option<u32>) -> anyhow::Result<EnsembleConfig> {
    let cfg = EnsembleConfig { n_control: n.unwrap_or(base.n_control), n_total: total.unwrap_or(base.n_total) };
    cfg.check().map_err(|e| Usage(e.to_string()))?;
    Ok(cfg)
}

fn load_model(src: &ModelSource, err: Option<&mut dyn Write>) -> anyhow::Result<SuiteModel> {
    let mut model = if src.model == "bundled" {
        bundled::suite()
    } else {
        SuiteModel::load(&src.model)?
    };
    let report = model.validate();
    if let Some(err) = err {
        for w in &report.warnings {
            writeln!(err, "warning: {w}")?;
        }
    }
    if !report.is_valid() {
        let lines: Vec<String> = report.errors.iter().map(|e| format!("  {e}")).collect();
        return Err(anyhow!("{}: invalid suite model\n{}", src.model, lines.join("\n")));
    }
    model.ensemble = ensemble_override(model.ensemble, src.n_control, src.n_total)?;
    Ok(model)
}

fn build_scenario(a: &ScenarioArgs) -> anyhow::Result<Scenario> {
    let base = match &a.scenario {
        Some(p) => Scenario::load(p)?,
        None => Scenario::identity(),
    };
    let mut inline = Scenario { control_members: a.n_prime, total_members: a.total_prime, ..Scenario::identity() };
    for (c, v) in &a.speedup {
        inline.speedup.insert(*c, *v);
    }
    for (c, v) in &a.energy_factor {
        inline.energy_factor.insert(*c, *v);
    }
    inline.io_scale = a.io_scale.unwrap_or(1.0);
    inline.compute_scale = a.compute_scale.unwrap_or(1.0);
    inline.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(base.then(&inline))
}

fn write_output(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn json_text(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn cmd_ingest(a: IngestArgs, out: &mut dyn Write) -> CliResult {
    if a.mpi.is_empty() && a.io.is_empty() && a.io_single.is_empty() {
        return Err(Usage("no profiler files given; use --mpi, --io or --io-single".into()).into());
    }
    let mut records = Vec::new();
    for p in &a.mpi {
        records.push(read_mpi_profile(p).with_context(|| p.display().to_string())?);
    }
    for p in &a.io {
        records.push(read_io_profile(p, IoMode::Parallel).with_context(|| p.display().to_string())?);
    }
    for p in &a.io_single {
        records.push(read_io_profile(p, IoMode::Single).with_context(|| p.display().to_string())?);
    }
    let profiles = merge_all(records)?;
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for p in &profiles {
            p.save(dir.join(format!("{}.kjp", p.job)))?;
        }
    }
    match a.format {
        Format::Json => write!(out, "{}", json_text(&profiles))?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut *out);
            w.write_record(["job", "read_bytes", "compute_s", "mpi_bytes", "ranks", "write_bytes", "sources"])?;
            for p in &profiles {
                let s = phase_summary(p);
                w.write_record([
                    p.job.clone(),
                    s.read.to_string(),
                    s.compute.to_string(),
                    s.mpi.to_string(),
                    s.ranks.to_string(),
                    s.write.to_string(),
                    p.provenance.len().to_string(),
                ])?;
            }
            w.flush()?;
        }
        Format::Table => {
            writeln!(out, "{:<20} {:>14} {:>12} {:>14} {:>6} {:>14}", "job", "read_bytes", "compute_s", "mpi_bytes", "ranks", "write_bytes")?;
            for p in &profiles {
                let s = phase_summary(p);
                writeln!(
                    out,
                    "{:<20} {:>14} {:>12.3} {:>14} {:>6} {:>14}",
                    p.job, s.read, s.compute, s.mpi, s.ranks, s.write
                )?;
            }
        }
    }
    Ok(EXIT_OK)
}

#[derive(Default)]
struct PhaseSummary {
    read: u64,
    compute: f64,
    mpi: u64,
    ranks: u32,
    write: u64,
}

fn phase_summary(p: &UnifiedJobProfile) -> PhaseSummary {
    let mut s = PhaseSummary::default();
    for ph in &p.phases {
        match *ph {
            Phase::IoRead { bytes } => s.read += bytes,
            Phase::Compute { duration_s } => s.compute += duration_s,
            Phase::MpiExchange { bytes, ranks } => {
                s.mpi += bytes;
                s.ranks = ranks;
            }
            Phase::IoWrite { bytes } => s.write += bytes,
        }
    }
    s
}

fn cmd_model(a: ModelArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let mut model = match &a.measurements {
        Some(p) => load_measurements(p, a.resolution).with_context(|| p.display().to_string())?,
        None => {
            let mut m = bundled::suite();
            m.edges.clear();
            for j in &mut m.jobs {
                j.low_confidence = j.wallclock_ctrl_s.max(j.wallclock_pert_s) < a.resolution;
            }
            m
        }
    };
    model.edges = match (&a.edges, &a.measurements) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("{}: invalid edges file", p.display()))?
        }
        (None, None) => bundled::edges(),
        (None, Some(_)) => Vec::new(),
    };
    model.ensemble = ensemble_override(model.ensemble, a.n_control, a.n_total)?;
    let report = model.validate();
    for w in &report.warnings {
        writeln!(err, "warning: {w}")?;
    }
    if !report.is_valid() {
        for e in &report.errors {
            writeln!(err, "error: {e}")?;
        }
        return Ok(EXIT_INVALID);
    }
    let text = model.to_json_string();
    match &a.output {
        Some(p) => write_output(p, &text)?,
        None => write!(out, "{text}")?,
    }
    Ok(EXIT_OK)
}

fn scatter_samples(model: &SuiteModel) -> Vec<f64> {
    let longest = model.jobs.iter().map(|j| j.wallclock_ctrl_s.max(j.wallclock_pert_s)).fold(0.0, f64::max);
    vec![0.0, longest]
}

fn cmd_report(a: ReportArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let model = load_model(&a.source, Some(err))?;
    let cfg = model.ensemble;
    let opts = BreakdownOptions { exclude_forecast: a.exclude_forecast, exclude_contaminated: a.exclude_contaminated };
    let suite = category_breakdown(&model, &cfg, opts)?;
    let affine = affine_total(&model);
    let total = suite_total(&model, &cfg);
    let members: Vec<_> = [MemberKind::Control, MemberKind::Perturbed]
        .into_iter()
        .filter(|k| match k {
            MemberKind::Control => cfg.n_control > 0,
            MemberKind::Perturbed => cfg.n_perturbed() > 0,
        })
        .map(|k| Ok((k, member_breakdown(&model, &cfg, k, opts)?, wallclock_breakdown(&model, k))))
        .collect::<anyhow::Result<_>>()?;
    let low_conf: Vec<&str> = model.jobs.iter().filter(|j| j.low_confidence).map(|j| j.name.as_str()).collect();

    if let Some(p) = &a.scatter_out {
        let mut buf = Vec::new();
        power_scatter(&model, &cfg).write_csv(&mut buf, &a.iso_power, &scatter_samples(&model))?;
        fs::write(p, buf).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.breakdown_out {
        let mut buf = Vec::new();
        write_breakdown_csv(&suite, &mut buf)?;
        fs::write(p, buf).with_context(|| format!("writing {}", p.display()))?;
    }

    match a.format {
        Format::Csv => write_breakdown_csv(&suite, &mut *out)?,
        Format::Json => {
            let per_member: BTreeMap<&str, _> = members
                .iter()
                .map(|(k, e, w)| (k.as_str(), json!({ "energy": e, "wallclock": w })))
                .collect();
            let doc = json!({
                "ensemble": cfg,
                "affine": affine,
                "total_kj": total,
                "published_total_kj": PUBLISHED_TOTAL_2_22_KJ,
                "suite": suite,
                "members": per_member,
                "low_confidence": low_conf,
            });
            write!(out, "{}", json_text(&doc))?;
        }
        Format::Table => {
            let mut s = String::new();
            writeln!(s, "ensemble: n={} N={}", cfg.n_control, cfg.n_total)?;
            writeln!(
                s,
                "affine total: {:.2}*n + {:.2}*N + {:.2} kJ",
                affine.per_control_kj, affine.per_member_kj, affine.fixed_kj
            )?;
            writeln!(s, "computed total: {total:.1} kJ")?;
            writeln!(s, "published (rounded) total for n=2, N=22: ≈ {PUBLISHED_TOTAL_2_22_KJ:.0} kJ")?;
            if a.exclude_contaminated {
                writeln!(s, "excluded (shared queue): {}", suite.contaminated_jobs.join(", "))?;
            }
            writeln!(s)?;
            let basis = if a.exclude_forecast { "fraction (excl. Forecast)" } else { "fraction" };
            writeln!(s, "{:<18} {:>14} {:>10}", "category", "energy_kj", basis)?;
            for (c, kj) in &suite.per_category_kj {
                let f = suite.fractions.get(c).map_or("-".to_string(), |f| format!("{f:.4}"));
                writeln!(s, "{:<18} {:>14.1} {:>10}", c.as_str(), kj, f)?;
            }
            writeln!(s, "{:<18} {:>14.1}", "total", suite.total_kj)?;
            for (k, e, w) in &members {
                writeln!(s)?;
                writeln!(s, "{} member: {:.1} kJ, {:.1} s serial path", k.as_str(), e.total_kj, w.total_s)?;
                writeln!(s, "{:<18} {:>14} {:>10} {:>10} {:>10}", "category", "energy_kj", "fraction", "wall_s", "fraction")?;
                for c in JobCategory::ALL {
                    let kj = e.per_category_kj.get(&c).copied().unwrap_or(0.0);
                    let ws = w.per_category_s.get(&c).copied().unwrap_or(0.0);
                    let ef = e.fractions.get(&c).map_or("-".to_string(), |f| format!("{f:.4}"));
                    let wf = w.fractions.get(&c).copied().unwrap_or(0.0);
                    writeln!(s, "{:<18} {:>14.1} {:>10} {:>10.1} {:>10.4}", c.as_str(), kj, ef, ws, wf)?;
                }
            }
            if !low_conf.is_empty() {
                writeln!(s)?;
                writeln!(s, "low-confidence energy (below counter resolution): {}", low_conf.join(", "))?;
            }
            write!(out, "{s}")?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_simulate(a: SimulateArgs, out: &mut dyn Write) -> CliResult {
    let model = load_model(&a.source, None)?;
    let scenario = build_scenario(&a.scenario)?;
    let model = apply_scenario(&model, &scenario)?;
    let graph = model.expand()?;
    let result = simulate(&graph, &model.cluster, a.nodes, Policy::default())?;
    if let Some(p) = &a.events_out {
        let mut buf = Vec::new();
        result.write_events_csv(&mut buf)?;
        fs::write(p, buf).with_context(|| format!("writing {}", p.display()))?;
    }
    match a.format {
        Format::Csv => result.write_events_csv(&mut *out)?,
        Format::Json => {
            let mut doc = result.summary_json();
            doc["instances"] = json!(graph.len());
            doc["ensemble"] = json!(model.ensemble);
            write!(out, "{}", json_text(&doc))?;
        }
        Format::Table => {
            let u = utilization(&result);
            let nodes = match a.nodes {
                NodeLimit::Unlimited => "unlimited".to_string(),
                NodeLimit::Nodes(k) => k.to_string(),
            };
            writeln!(out, "ensemble: n={} N={}", model.ensemble.n_control, model.ensemble.n_total)?;
            writeln!(out, "instances: {}", graph.len())?;
            writeln!(out, "nodes: {nodes} ({} used)", result.per_node_busy_s.len())?;
            writeln!(out, "makespan: {:.1} s", result.makespan_s)?;
            writeln!(out, "critical path: {:.1} s over {} instances", result.critical_path_s, result.critical_path.len())?;
            writeln!(out, "utilization: {:.4}", u.aggregate)?;
            writeln!(out)?;
            writeln!(out, "{:<18} {:>14}", "category", "busy_s")?;
            for (c, b) in &result.per_category_busy_s {
                writeln!(out, "{:<18} {:>14.1}", c.as_str(), b)?;
            }
        }
    }
    Ok(EXIT_OK)
}

fn speedup_cell(r: &Result<f64, WhatIfError>) -> anyhow::Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(*v)),
        Err(WhatIfError::DegeneratePath { .. }) => Ok(None),
        Err(e) => Err(anyhow!("{e}")),
    }
}

fn cmd_whatif(a: WhatifArgs, out: &mut dyn Write) -> CliResult {
    let base = load_model(&a.source, None)?;
    let scenario = build_scenario(&a.scenario)?;
    let changed = apply_scenario(&base, &scenario)?;
    let paths: Vec<MemberKind> = match a.path {
        PathSel::Control => vec![MemberKind::Control],
        PathSel::Perturbed => vec![MemberKind::Perturbed],
        PathSel::Both => vec![MemberKind::Control, MemberKind::Perturbed],
    };
    let categories: Vec<JobCategory> = match a.zero_category {
        Some(c) => vec![c],
        None => JobCategory::ALL.to_vec(),
    };

    let mut bounds = Vec::new();
    for &c in &categories {
        let row: Vec<Option<f64>> =
            paths.iter().map(|&p| speedup_cell(&max_speedup(&changed, c, p))).collect::<anyhow::Result<_>>()?;
        bounds.push((c, row));
    }
    let mut savings = Vec::new();
    for (&c, &f) in &scenario.energy_factor {
        if f <= 1.0 {
            savings.push((c, f, energy_savings(&base, &base.ensemble, c, f)?));
        }
    }
    let before = suite_total(&base, &base.ensemble);
    let after = suite_total(&changed, &changed.ensemble);
    let path_times: Vec<(MemberKind, f64, f64)> =
        paths.iter().map(|&p| (p, path_time(&base, p, None), path_time(&changed, p, None))).collect();

    match a.format {
        Format::Json => {
            let b: Vec<_> = bounds
                .iter()
                .map(|(c, row)| {
                    let cells: BTreeMap<&str, Option<f64>> =
                        paths.iter().zip(row).map(|(p, v)| (p.as_str(), *v)).collect();
                    json!({ "category": c, "max_speedup": cells })
                })
                .collect();
            let sv: Vec<_> = savings
                .iter()
                .map(|(c, f, s)| json!({ "category": c, "factor": f, "saved_kj": s.saved_kj, "fraction": s.fraction }))
                .collect();
            let pt: Vec<_> = path_times
                .iter()
                .map(|(p, b, a)| json!({ "path": p, "baseline_s": b, "scenario_s": a }))
                .collect();
            let doc = json!({
                "scenario": scenario,
                "baseline_total_kj": before,
                "scenario_total_kj": after,
                "paths": pt,
                "speedup_bounds": b,
                "savings": sv,
            });
            write!(out, "{}", json_text(&doc))?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut *out);
            w.write_record(["category", "path", "max_speedup"])?;
            for (c, row) in &bounds {
                for (p, v) in paths.iter().zip(row) {
                    let v = v.map_or("inf".to_string(), |v| v.to_string());
                    w.write_record([c.as_str(), p.as_str(), v.as_str()])?;
                }
            }
            w.flush()?;
        }
        Format::Table => {
            writeln!(
                out,
                "ensemble: n={} N={} -> n={} N={}",
                base.ensemble.n_control, base.ensemble.n_total, changed.ensemble.n_control, changed.ensemble.n_total
            )?;
            writeln!(out, "suite energy: {before:.1} kJ -> {after:.1} kJ")?;
            for (p, b, s) in &path_times {
                writeln!(out, "{} path: {b:.1} s -> {s:.1} s", p.as_str())?;
            }
            writeln!(out)?;
            write!(out, "{:<18}", "max speedup if zero")?;
            for p in &paths {
                write!(out, " {:>10}", p.as_str())?;
            }
            writeln!(out)?;
            for (c, row) in &bounds {
                write!(out, "{:<18}", c.as_str())?;
                for v in row {
                    match v {
                        Some(v) => write!(out, " {v:>10.3}")?,
                        None => write!(out, " {:>10}", "inf")?,
                    }
                }
                writeln!(out)?;
            }
            if !savings.is_empty() {
                writeln!(out)?;
                writeln!(out, "{:<18} {:>8} {:>14} {:>10}", "energy saving", "factor", "saved_kj", "fraction")?;
                for (c, f, s) in &savings {
                    writeln!(out, "{:<18} {:>8.3} {:>14.1} {:>10.4}", c.as_str(), f, s.saved_kj, s.fraction)?;
                }
            }
        }
    }
    Ok(EXIT_OK)
}

fn cmd_schedule(a: ScheduleArgs, out: &mut dyn Write) -> CliResult {
    let model = load_model(&a.source, None)?;
    let scenario = build_scenario(&a.scenario)?;
    let profiles = if a.profile.is_empty() {
        bundled::profiles()
    } else {
        a.profile
            .iter()
            .map(|p| UnifiedJobProfile::load(p).with_context(|| p.display().to_string()))
            .collect::<anyhow::Result<Vec<_>>>()?
    };
    let doc = generate_schedule(&profiles, &model.edges, &model.jobs, &model.ensemble, &scenario)?;
    doc.save(&a.output)?;
    let ens = scenario.ensemble(&model.ensemble);
    writeln!(out, "wrote {} jobs for n={} N={} to {}", doc.jobs.len(), ens.n_control, ens.n_total, a.output.display())?;
    Ok(EXIT_OK)
}

fn cmd_execute(a: ExecuteArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    if a.parallelism == 0 {
        return Err(Usage("--parallelism must be at least 1".into()).into());
    }
    if a.desk_scale.is_nan() || a.desk_scale <= 0.0 || a.ceiling.is_nan() || a.ceiling < 0.0 {
        return Err(Usage("--desk-scale must be positive and --ceiling non-negative".into()).into());
    }
    let doc = ScheduleDocument::load(&a.schedule)?;
    let doc = scale_schedule(&doc, a.io_scale, a.compute_scale)?;
    let opts = ExecOptions {
        parallelism: a.parallelism,
        workdir: a.workdir.clone().unwrap_or_else(ExecOptions::default_workdir),
        desk_scale: a.desk_scale,
        compute_ceiling_s: a.ceiling,
        keep_scratch: a.keep_scratch,
    };
    let backend = LocalProcessBackend::current_exe().context("locating the stub executable")?;
    let log = execute(&doc, &backend, &opts)?;
    if let Some(p) = &a.log_out {
        write_output(p, &json_text(&log))?;
    }

    let mut by_id: Vec<_> = log.records.iter().collect();
    by_id.sort_by_key(|r| r.job_id);
    let status = |s: &JobStatus| match s {
        JobStatus::Succeeded => "succeeded".to_string(),
        JobStatus::Failed { .. } => "failed".to_string(),
        JobStatus::Skipped { failed_dependency } => format!("skipped (job {failed_dependency} failed)"),
    };
    match a.format {
        Format::Json => {
            let rows: Vec<_> = by_id
                .iter()
                .map(|r| json!({ "job_id": r.job_id, "name": r.name, "exit_status": r.exit_status,
                                  "bytes_read": r.bytes_read, "bytes_written": r.bytes_written }))
                .collect();
            write!(out, "{}", json_text(&rows))?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut *out);
            w.write_record(["job_id", "name", "status", "bytes_read", "bytes_written"])?;
            for r in &by_id {
                w.write_record([
                    r.job_id.to_string(),
                    r.name.clone(),
                    status(&r.exit_status),
                    r.bytes_read.to_string(),
                    r.bytes_written.to_string(),
                ])?;
            }
            w.flush()?;
        }
        Format::Table => {
            writeln!(out, "{:>6} {:<32} {:>14} {:>14}  status", "id", "job", "bytes_read", "bytes_written")?;
            for r in &by_id {
                writeln!(
                    out,
                    "{:>6} {:<32} {:>14} {:>14}  {}",
                    r.job_id,
                    r.name,
                    r.bytes_read,
                    r.bytes_written,
                    status(&r.exit_status)
                )?;
            }
            let ok = by_id.iter().filter(|r| r.exit_status == JobStatus::Succeeded).count();
            writeln!(out, "{ok} of {} jobs succeeded, {} bytes written", by_id.len(), log.total_bytes_written())?;
        }
    }
    match log.into_result() {
        Ok(_) => Ok(EXIT_OK),
        Err(e) => {
            writeln!(err, "error: {e}")?;
            Ok(EXIT_INVALID)
        }
    }
}

fn cmd_stub(a: StubArgs, out: &mut dyn Write) -> CliResult {
    let text = fs::read_to_string(&a.job).with_context(|| format!("reading {}", a.job.display()))?;
    let job: StubJob = serde_json::from_str(&text).context("invalid stub job")?;
    let report = crate::exec::run_stub(&job, &a.scratch)?;
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    Ok(EXIT_OK)
}
