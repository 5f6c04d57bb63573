//! Report assembly and emission.
//!
//! An output directory receives:
//!
//! - `report.json`: metadata, per (test, phase) summaries and raw records;
//! - `summary.csv`: one row per (test, phase), header
//!   `model,phase,energy_kwh,co2_kg,duration_s,n,energy_ci95`;
//! - `plotdata/<figure>.csv`: bar-chart data, header
//!   `category,mean,ci_low,ci_high,accuracy`.
//!
//! All numbers are written with 6 significant digits. Files are staged in a
//! temporary directory next to the destination and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{compute_emissions, per_item_energy, summarize, AccountingError, EmissionParams, SummaryStats};
use crate::harness::{EnergyBudget, Phase, PhaseRecord, SkippedPhase};
use crate::sources::PowerSourceDescriptor;

pub const SCHEMA_VERSION: u32 = 1;
pub const SUMMARY_HEADER: [&str; 7] = ["model", "phase", "energy_kwh", "co2_kg", "duration_s", "n", "energy_ci95"];
pub const PLOT_HEADER: [&str; 5] = ["category", "mean", "ci_low", "ci_high", "accuracy"];

pub const ATTRIBUTION_SCOPE: &str = "energy covers whole measured domains (CPU packages, GPUs) for the duration of \
each phase; other processes on the node are included";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Md,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Md),
            _ => Err(format!("unknown format {s:?} (json, csv or md)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no phase records to report")]
    Empty,
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub tool_version: String,
    pub suite: String,
    pub backend: String,
    pub sources: Vec<PowerSourceDescriptor>,
    pub interval_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval_note: Option<String>,
    pub emission: EmissionParams,
    pub short_run_threshold_s: f64,
    pub repetitions: u32,
    pub warmup_runs: u32,
    pub work_scales: BTreeMap<String, f64>,
    /// Reported accuracy per model, only where the user supplied one.
    pub model_accuracy: BTreeMap<String, f64>,
    pub budget: Option<EnergyBudget>,
    /// Wall-clock timestamps; null in fixed-metadata mode.
    pub started_at: Option<String>,
    pub finished_at: Option<String>,
    pub generated_at: Option<String>,
    pub attribution_scope: String,
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkippedPhase>,
}

impl ReportMetadata {
    pub fn new(suite: &str, backend: &str, sources: Vec<PowerSourceDescriptor>, interval_s: f64) -> Self {
        Self {
            tool_version: crate::TOOL_VERSION.to_owned(),
            suite: suite.to_owned(),
            backend: backend.to_owned(),
            sources,
            interval_s,
            interval_note: None,
            emission: EmissionParams::default(),
            short_run_threshold_s: crate::tracker::DEFAULT_SHORT_RUN_THRESHOLD_S,
            repetitions: 1,
            warmup_runs: 0,
            work_scales: BTreeMap::new(),
            model_accuracy: BTreeMap::new(),
            budget: None,
            started_at: None,
            finished_at: None,
            generated_at: None,
            attribution_scope: ATTRIBUTION_SCOPE.to_owned(),
            notes: Vec::new(),
            skipped: Vec::new(),
        }
    }

    /// Drop wall-clock timestamps so identical inputs give identical bytes.
    pub fn fixed(mut self) -> Self {
        self.started_at = None;
        self.finished_at = None;
        self.generated_at = None;
        self
    }
}

/// Statistics over the successful repetitions of one (test, phase).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub test_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub phase: Phase,
    pub n: usize,
    pub failed: usize,
    pub stopped_by_budget: usize,
    pub energy_kwh: SummaryStats,
    pub co2_kg: SummaryStats,
    pub duration_s: SummaryStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_per_item_kwh: Option<SummaryStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub metadata: ReportMetadata,
    pub groups: Vec<GroupSummary>,
    pub records: Vec<PhaseRecord>,
}

/// Summaries per (test, phase) in first-appearance order. Emissions are
/// recomputed from joules with `params`.
pub fn build_report(
    mut records: Vec<PhaseRecord>,
    params: &EmissionParams,
    mut metadata: ReportMetadata,
) -> Result<Report, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    params.validate()?;
    metadata.emission = *params;
    for r in &mut records {
        r.emissions = compute_emissions(super::joules_to_kwh(r.energy.total_joules), params);
    }

    let mut keys: Vec<(String, Phase)> = Vec::new();
    for r in &records {
        let key = (r.test_name.clone(), r.phase);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut groups = Vec::new();
    for (test, phase) in keys {
        let all: Vec<&PhaseRecord> = records
            .iter()
            .filter(|r| r.test_name == test && r.phase == phase)
            .collect();
        let ok: Vec<&PhaseRecord> = all.iter().copied().filter(|r| !r.failed()).collect();
        if ok.is_empty() {
            metadata.notes.push(format!("{test} {phase}: every repetition failed"));
            continue;
        }
        let col = |f: &dyn Fn(&PhaseRecord) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<_>>();
        let per_item = if ok.iter().all(|r| r.item_count.is_some()) {
            let v = ok
                .iter()
                .map(|r| per_item_energy(r.emissions.energy_kwh, r.item_count.unwrap_or(1)))
                .collect::<Result<Vec<_>, _>>()?;
            Some(summarize(&v)?)
        } else {
            None
        };
        groups.push(GroupSummary {
            model: ok[0].model.clone(),
            test_name: test,
            phase,
            n: ok.len(),
            failed: all.len() - ok.len(),
            stopped_by_budget: ok.iter().filter(|r| r.stopped_by_budget).count(),
            energy_kwh: summarize(&col(&|r| r.emissions.energy_kwh))?,
            co2_kg: summarize(&col(&|r| r.emissions.co2_kg))?,
            duration_s: summarize(&col(&|r| r.duration_s))?,
            energy_per_item_kwh: per_item,
        });
    }
    Ok(Report {
        schema_version: SCHEMA_VERSION,
        metadata,
        groups,
        records,
    })
}

/// `x` rounded to 6 significant digits.
pub fn sig6(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

fn fmt6(x: f64) -> String {
    format!("{x:.5e}")
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(sig6).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_value),
        Value::Object(o) => o.values_mut().for_each(round_value),
        _ => {}
    }
}

/// The exact bytes of `report.json`.
pub fn render_json(report: &Report) -> String {
    let mut v = serde_json::to_value(report).expect("report serializes");
    round_value(&mut v);
    let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
    s.push('\n');
    s
}

pub fn render_summary_csv(report: &Report) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_HEADER)?;
    for g in &report.groups {
        w.write_record([
            g.test_name.clone(),
            g.phase.to_string(),
            fmt6(g.energy_kwh.mean),
            fmt6(g.co2_kg.mean),
            fmt6(g.duration_s.mean),
            g.n.to_string(),
            g.energy_kwh.ci95_half_width.map(fmt6).unwrap_or_default(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv is utf-8"))
}

fn plot_csv(report: &Report, phase: Phase, pick: fn(&GroupSummary) -> Option<&SummaryStats>) -> Result<Option<String>, ReportError> {
    let rows: Vec<(&GroupSummary, &SummaryStats)> = report
        .groups
        .iter()
        .filter(|g| g.phase == phase)
        .filter_map(|g| pick(g).map(|s| (g, s)))
        .collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(PLOT_HEADER)?;
    for (g, s) in rows {
        let (lo, hi) = s.ci_bounds();
        let accuracy = g
            .model
            .as_ref()
            .and_then(|m| report.metadata.model_accuracy.get(m))
            .map(|a| fmt6(*a))
            .unwrap_or_default();
        w.write_record([g.test_name.clone(), fmt6(s.mean), fmt6(lo), fmt6(hi), accuracy])?;
    }
    Ok(Some(String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv is utf-8")))
}

type Statistic = fn(&GroupSummary) -> Option<&SummaryStats>;

/// Plot-data files by name; groups without the statistic are left out and
/// files without rows are not produced.
pub fn render_plotdata(report: &Report) -> Result<Vec<(String, String)>, ReportError> {
    let figures: [(&str, Phase, Statistic); 5] = [
        ("training_energy", Phase::Training, |g| Some(&g.energy_kwh)),
        ("training_duration", Phase::Training, |g| Some(&g.duration_s)),
        ("inference_energy", Phase::Inference, |g| Some(&g.energy_kwh)),
        ("inference_duration", Phase::Inference, |g| Some(&g.duration_s)),
        ("inference_energy_per_item", Phase::Inference, |g| g.energy_per_item_kwh.as_ref()),
    ];
    let mut out = Vec::new();
    for (name, phase, pick) in figures {
        if let Some(body) = plot_csv(report, phase, pick)? {
            out.push((format!("{name}.csv"), body));
        }
    }
    Ok(out)
}

pub fn render_markdown(report: &Report) -> String {
    let pm = |s: &SummaryStats| match s.ci95_half_width {
        Some(h) => format!("{} ± {}", fmt6(s.mean), fmt6(h)),
        None => fmt6(s.mean),
    };
    let mut out = String::new();
    out.push_str(&format!("# {}\n\n", report.metadata.suite));
    out.push_str(&format!(
        "backend: {}, interval {} s, PUE {}, {} g CO2/kWh\n\n",
        report.metadata.backend,
        report.metadata.interval_s,
        report.metadata.emission.pue,
        report.metadata.emission.carbon_intensity_g_per_kwh
    ));
    out.push_str("| model | phase | energy (kWh) | CO2 (kg) | duration (s) | n |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for g in &report.groups {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            g.test_name,
            g.phase,
            pm(&g.energy_kwh),
            pm(&g.co2_kg),
            pm(&g.duration_s),
            g.n
        ));
    }
    if !report.metadata.notes.is_empty() {
        out.push('\n');
        for n in &report.metadata.notes {
            out.push_str(&format!("- {n}\n"));
        }
    }
    out
}

pub fn render(report: &Report, format: ReportFormat) -> Result<String, ReportError> {
    Ok(match format {
        ReportFormat::Json => render_json(report),
        ReportFormat::Csv => render_summary_csv(report)?,
        ReportFormat::Md => render_markdown(report),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub report_json: PathBuf,
    pub summary_csv: PathBuf,
    pub plotdata: Vec<PathBuf>,
}

/// Write the report files into `out_dir`.
pub fn emit_report(report: &Report, out_dir: &Path) -> Result<ReportFiles, ReportError> {
    let json = render_json(report);
    let summary = render_summary_csv(report)?;
    let plots = render_plotdata(report)?;

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let stage = tempfile::Builder::new()
        .prefix(".report-")
        .tempdir_in(out_dir)
        .map_err(io_err(out_dir))?;
    let staged_plots = stage.path().join("plotdata");
    fs::create_dir(&staged_plots).map_err(io_err(&staged_plots))?;
    let write = |path: PathBuf, body: &str| fs::write(&path, body).map_err(io_err(&path));
    write(stage.path().join("report.json"), &json)?;
    write(stage.path().join("summary.csv"), &summary)?;
    for (name, body) in &plots {
        write(staged_plots.join(name), body)?;
    }

    let plot_dir = out_dir.join("plotdata");
    fs::create_dir_all(&plot_dir).map_err(io_err(&plot_dir))?;
    let mut files = ReportFiles {
        report_json: out_dir.join("report.json"),
        summary_csv: out_dir.join("summary.csv"),
        plotdata: Vec::new(),
    };
    for (name, _) in &plots {
        let dest = plot_dir.join(name);
        fs::rename(staged_plots.join(name), &dest).map_err(io_err(&dest))?;
        files.plotdata.push(dest);
    }
    fs::rename(stage.path().join("summary.csv"), &files.summary_csv).map_err(io_err(&files.summary_csv))?;
    // report.json last: its presence marks a complete report
    fs::rename(stage.path().join("report.json"), &files.report_json).map_err(io_err(&files.report_json))?;
    Ok(files)
}

/// One parsed `summary.csv` row.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub phase: Phase,
    pub energy_kwh: f64,
    pub co2_kg: f64,
    pub duration_s: f64,
    pub n: usize,
    pub energy_ci95: Option<f64>,
}

pub fn parse_summary_csv(text: &str) -> Result<Vec<SummaryRow>, ReportError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<Result<Vec<SummaryRow>, _>>()?)
}
