//! `benchtrack`: run phased benchmark suites and report their energy use.
//!
//! Exit status: 0 on success, 1 when some phases failed but a report was
//! still produced, 2 on configuration, backend or input errors.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use benchtrack::accounting::report::{render, Report, ReportFormat, ReportMetadata};
use benchtrack::accounting::{build_report, emit_report, EmissionParams};
use benchtrack::clock::wall_clock;
use benchtrack::config::{load_suite_file, resolve, SuiteFile, SuiteOverrides};
use benchtrack::harness::{
    read_records, record_from_trace, run_suite, Backend, BackendKind, BudgetScope, ModelCatalog, PhaseRecord,
    Workload,
};
use benchtrack::sources::powercap::powercap_root_from_env;
use benchtrack::sources::{discover_cpu_counters, discover_gpus, GpuQuery};
use benchtrack::tracker::trace::{read_trace, RecordedTrace};

const DEFAULT_OUT: &str = "benchtrack-out";

#[derive(Parser)]
#[command(name = "benchtrack", version, about = "Energy and CO2 accounting for phased benchmark suites")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a suite and write its report.
    Run(RunArgs),
    /// Re-analyse persisted session traces.
    Replay(ReplayArgs),
    /// Rebuild a report from a records.jsonl file or output directory.
    Report(ReportArgs),
    /// List the model catalog.
    ListModels(ListArgs),
    /// Show the energy sources visible on this machine.
    Probe(ProbeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Rapl,
    Simulated,
    Replay,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Rapl => BackendKind::Rapl,
            BackendArg::Simulated => BackendKind::Simulated,
            BackendArg::Replay => BackendKind::Replay,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    PerPhase,
    PerSuite,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
    Md,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Md => ReportFormat::Md,
        }
    }
}

#[derive(Args)]
struct EmissionArgs {
    /// Power usage effectiveness (>= 1).
    #[arg(long, env = "JM_PUE")]
    pue: Option<f64>,
    /// Grid carbon intensity in g CO2-eq/kWh.
    #[arg(long, env = "JM_CARBON_INTENSITY")]
    carbon_intensity: Option<f64>,
}

#[derive(Args)]
struct OutputArgs {
    /// Output directory.
    #[arg(long, env = "JM_OUT")]
    out: Option<PathBuf>,
    /// What to print on standard output.
    #[arg(long, value_enum, env = "JM_FORMAT")]
    format: Option<FormatArg>,
    /// Leave wall-clock timestamps out of the report.
    #[arg(long)]
    fixed_metadata: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Suite file, or the name of a built-in suite.
    #[arg(long, env = "JM_CONFIG")]
    config: PathBuf,
    #[arg(long, value_enum, env = "JM_BACKEND")]
    backend: BackendArg,
    #[arg(long, env = "JM_POWERCAP_ROOT")]
    powercap_root: Option<PathBuf>,
    /// Shell command printing `index, watts` lines.
    #[arg(long, env = "JM_GPU_QUERY")]
    gpu_query: Option<String>,
    /// Trace file played back by the replay backend.
    #[arg(long, env = "JM_REPLAY_TRACE")]
    trace: Option<PathBuf>,
    #[arg(long, env = "JM_INTERVAL_S")]
    interval_s: Option<f64>,
    #[arg(long, env = "JM_REPETITIONS")]
    repetitions: Option<u32>,
    #[arg(long, env = "JM_WARMUP_RUNS")]
    warmup_runs: Option<u32>,
    /// Synthetic work multiplier for every model test.
    #[arg(long, env = "JM_WORK_SCALE")]
    work_scale: Option<f64>,
    #[command(flatten)]
    emission: EmissionArgs,
    #[arg(long, env = "JM_BUDGET_JOULES")]
    budget_joules: Option<f64>,
    #[arg(long, value_enum, env = "JM_BUDGET_SCOPE")]
    budget_scope: Option<ScopeArg>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct ReplayArgs {
    /// Trace files (`*.trace.jsonl`) or directories holding them.
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    #[command(flatten)]
    emission: EmissionArgs,
    #[arg(long)]
    short_run_threshold_s: Option<f64>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// A records.jsonl file or a run output directory.
    input: PathBuf,
    #[command(flatten)]
    emission: EmissionArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ListFormat {
    Text,
    Json,
}

#[derive(Args)]
struct ListArgs {
    /// Suite file whose model entries extend the catalog.
    #[arg(long, env = "JM_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: ListFormat,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, env = "JM_POWERCAP_ROOT")]
    powercap_root: Option<PathBuf>,
    #[arg(long, env = "JM_GPU_QUERY")]
    gpu_query: Option<String>,
    /// Skip the GPU query.
    #[arg(long)]
    no_gpu: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Report(a) => cmd_report(a),
        Command::ListModels(a) => cmd_list_models(a),
        Command::Probe(a) => cmd_probe(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn emission_params(args: &EmissionArgs, base: EmissionParams) -> Result<EmissionParams> {
    let p = EmissionParams {
        pue: args.pue.unwrap_or(base.pue),
        carbon_intensity_g_per_kwh: args.carbon_intensity.unwrap_or(base.carbon_intensity_g_per_kwh),
    };
    p.validate()?;
    Ok(p)
}

/// Write the report files and print the chosen rendering.
fn publish(report: &Report, out: &Path, format: ReportFormat) -> Result<()> {
    let files = emit_report(report, out).with_context(|| format!("writing report to {}", out.display()))?;
    log::info!("report written to {}", files.report_json.display());
    let text = render(report, format)?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(text.as_bytes())?;
    stdout.flush()?;
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let file: SuiteFile = load_suite_file(&args.config)?;
    let backend_kind: BackendKind = args.backend.into();
    if let Some(k) = file.backend.kind.filter(|k| *k != backend_kind) {
        log::warn!("config selects backend {k}; --backend {backend_kind} wins");
    }
    let overrides = SuiteOverrides {
        backend: Some(backend_kind),
        powercap_root: args.powercap_root,
        gpu_query: args.gpu_query,
        replay_trace: args.trace,
        interval_s: args.interval_s,
        repetitions: args.repetitions,
        warmup_runs: args.warmup_runs,
        pue: args.emission.pue,
        carbon_intensity: args.emission.carbon_intensity,
        budget_joules: args.budget_joules,
        budget_scope: args.budget_scope.map(|s| match s {
            ScopeArg::PerPhase => BudgetScope::PerPhase,
            ScopeArg::PerSuite => BudgetScope::PerSuite,
        }),
        work_scale: args.work_scale,
        output_dir: args.output.out.clone(),
    };
    let mut config = resolve(&file, &overrides)?;
    let out = config.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    config.output_dir = Some(out.clone());
    let format = args.output.format.map(Into::into).or(file.format).unwrap_or(ReportFormat::Json);

    let backend = Backend::from_config(&config.backend).context("backend")?;
    let catalog = ModelCatalog::with_entries(&config.models)?;
    let outcome = run_suite(&config, &backend)?;
    if outcome.records.is_empty() {
        bail!("no phase produced a record");
    }

    let mut meta = ReportMetadata::new(&config.name, &backend.kind().to_string(), backend.descriptors(), config.interval_s);
    if config.interval_is_default {
        meta.interval_note = Some(format!(
            "sampling interval not configured; default {} s used",
            config.interval_s
        ));
    }
    meta.short_run_threshold_s = config.short_run_threshold_s;
    meta.repetitions = config.repetitions;
    meta.warmup_runs = config.warmup_runs;
    meta.work_scales = outcome.work_scales.clone();
    meta.budget = config.budget;
    meta.notes = backend.notes();
    if outcome.budget_exhausted {
        meta.notes.push("suite energy budget exhausted; remaining phases skipped".into());
    }
    meta.skipped = outcome.skipped.clone();
    meta.model_accuracy = config
        .tests
        .iter()
        .filter_map(|t| match &t.workload {
            Workload::Synthetic { model, .. } => catalog.get(model),
            Workload::External { .. } => None,
        })
        .filter_map(|e| e.reported_accuracy.map(|a| (e.name.clone(), a)))
        .collect::<BTreeMap<_, _>>();
    if !args.output.fixed_metadata {
        meta.started_at = Some(outcome.started_at.clone());
        meta.finished_at = Some(outcome.finished_at.clone());
        meta.generated_at = Some(outcome.finished_at.clone());
    }

    let report = build_report(outcome.records.clone(), &config.emission, meta)?;
    publish(&report, &out, format)?;
    let failed = outcome.failed_phases();
    if failed > 0 {
        eprintln!("{failed} phase(s) failed; see {}", out.join("report.json").display());
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn trace_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.to_string_lossy().ends_with(".trace.jsonl"))
                .collect();
            found.sort();
            if found.is_empty() {
                bail!("no *.trace.jsonl files in {}", p.display());
            }
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn cmd_replay(args: ReplayArgs) -> Result<ExitCode> {
    let emission = emission_params(&args.emission, EmissionParams::default())?;
    let mut traces = Vec::new();
    for path in trace_files(&args.traces)? {
        traces.push((read_trace(&path)?, path));
    }
    // execution order: repetition, then session start
    traces.sort_by(|(a, _), (b, _)| {
        let key = |t: &RecordedTrace| (t.header.repetition.unwrap_or(1), t.header.started_at);
        key(a).partial_cmp(&key(b)).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut records: Vec<PhaseRecord> = Vec::new();
    let mut sources = Vec::new();
    let interval_s = traces.first().map(|(t, _)| t.header.interval_s);
    for (trace, path) in traces {
        for d in &trace.header.sources {
            if !sources.contains(d) {
                sources.push(d.clone());
            }
        }
        let record = record_from_trace(trace, &emission, args.short_run_threshold_s)
            .with_context(|| format!("replaying {}", path.display()))?;
        records.push(record);
    }

    let mut meta = ReportMetadata::new("replay", "replay", sources, interval_s.unwrap_or(0.0));
    if let Some(t) = args.short_run_threshold_s {
        meta.short_run_threshold_s = t;
    }
    meta.repetitions = records.iter().map(|r| r.repetition_index).max().unwrap_or(1);
    if !args.output.fixed_metadata {
        meta.generated_at = Some(wall_clock());
    }
    let report = build_report(records, &emission, meta)?;
    let out = args.output.out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    publish(&report, &out, args.output.format.map(Into::into).unwrap_or(ReportFormat::Json))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode> {
    let (records_path, dir) = if args.input.is_dir() {
        (args.input.join("records.jsonl"), args.input.clone())
    } else {
        let dir = args.input.parent().map(Path::to_path_buf).unwrap_or_default();
        (args.input.clone(), dir)
    };
    let records = read_records(&records_path)?;
    let previous: Option<Report> = std::fs::read_to_string(dir.join("report.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    let (meta, base) = match previous {
        Some(r) => {
            let e = r.metadata.emission;
            (r.metadata, e)
        }
        None => (ReportMetadata::new("report", "unknown", Vec::new(), 0.0), EmissionParams::default()),
    };
    let emission = emission_params(&args.emission, base)?;
    let mut meta = if args.output.fixed_metadata { meta.fixed() } else { meta };
    if !args.output.fixed_metadata {
        meta.generated_at = Some(wall_clock());
    }
    let failed = records.iter().filter(|r| r.failed()).count();
    let report = build_report(records, &emission, meta)?;
    let out = args.output.out.unwrap_or(dir);
    publish(&report, &out, args.output.format.map(Into::into).unwrap_or(ReportFormat::Json))?;
    Ok(if failed > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn cmd_list_models(args: ListArgs) -> Result<ExitCode> {
    let catalog = match &args.config {
        Some(p) => ModelCatalog::with_entries(&load_suite_file(p)?.models)?,
        None => ModelCatalog::builtin(),
    };
    let mut out = std::io::stdout().lock();
    match args.format {
        ListFormat::Text => {
            for e in catalog.entries() {
                let params = e.parameters_millions;
                match e.reported_accuracy {
                    Some(a) => writeln!(out, "{} {params} {} {a}", e.name, e.task)?,
                    None => writeln!(out, "{} {params} {}", e.name, e.task)?,
                }
            }
        }
        ListFormat::Json => {
            serde_json::to_writer_pretty(&mut out, catalog.entries())?;
            writeln!(out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_probe(args: ProbeArgs) -> Result<ExitCode> {
    let root = args.powercap_root.unwrap_or_else(powercap_root_from_env);
    let mut out = std::io::stdout().lock();
    let mut found = 0;
    match discover_cpu_counters(&root) {
        Ok(domains) if !domains.is_empty() => {
            for d in domains {
                found += 1;
                let max = d.max_energy_range_uj.map_or("?".to_string(), |m| m.to_string());
                let role = if d.is_subdomain() { "subdomain" } else { "package" };
                writeln!(out, "cpu {} {} {role} max_energy_range_uj={max}", d.id, d.label)?;
            }
        }
        Ok(_) => writeln!(out, "cpu: no powercap domains under {}", root.display())?,
        Err(e) => writeln!(out, "cpu: unavailable ({e})")?,
    }
    if args.no_gpu {
        writeln!(out, "gpu: skipped")?;
    } else {
        let query = GpuQuery::new(args.gpu_query.unwrap_or_else(|| GpuQuery::default().command().to_owned()));
        match discover_gpus(&query) {
            Ok(gpus) if !gpus.is_empty() => {
                for d in gpus {
                    found += 1;
                    writeln!(out, "gpu {} {}", d.id, d.label)?;
                }
            }
            Ok(_) => writeln!(out, "gpu: none reported")?,
            Err(e) => writeln!(out, "gpu: unavailable ({e})")?,
        }
    }
    if found == 0 {
        writeln!(out, "no sources found")?;
    }
    Ok(ExitCode::SUCCESS)
}
