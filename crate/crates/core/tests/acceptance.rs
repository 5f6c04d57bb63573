//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Criteria run sequentially so timing-sensitive checks do
//! not compete with the suite run for CPU.

use std::fs;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use benchtrack::accounting::report::{parse_summary_csv, ReportMetadata};
use benchtrack::accounting::{build_report, compute_emissions, emit_report, summarize, EmissionParams};
use benchtrack::harness::{
    record_from_trace, run_phase, run_suite, Backend, BudgetScope, EnergyBudget, ModelCatalog, Phase, PhaseContext,
    SuiteConfig, TestSpec, Workload,
};
use benchtrack::sources::powercap::discover_cpu_counters;
use benchtrack::sources::{
    simulated_power_at, CpuCounterSource, EnergyCounterReading, PowerSample, PowerSource, Segment, Shape,
    SimulatedSource, SimulatedTraceSpec,
};
use benchtrack::tracker::trace::{read_trace, RecordedTrace, SourceLog, TraceHeader};
use benchtrack::tracker::{
    accumulate_counter_trace_uj, integrate_power_trace, start_tracking, start_tracking_with, short_run_warning,
    SessionOptions, TrackerConfig, TrackingSession,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

// (model, EC kWh, CE kg) with decimal commas normalized
const INFERENCE_ROWS: [(&str, f64, f64); 7] = [
    ("MobileNet-V2", 1.18e-3, 0.66e-4),
    ("Inception-V3", 1.96e-3, 1.10e-4),
    ("Inception-V4", 2.60e-3, 1.45e-4),
    ("Inception-ResNet-V2", 2.56e-3, 1.43e-4),
    ("ResNet-V2-50", 2.42e-3, 1.35e-4),
    ("ResNet-V2-152", 2.61e-3, 1.46e-4),
    ("VGG-16", 2.96e-3, 1.66e-4),
];
const TRAINING_ROWS: [(&str, f64, f64); 7] = [
    ("MobileNet-V2", 1.75e-3, 0.98e-4),
    ("Inception-V3", 2.98e-3, 1.67e-4),
    ("Inception-V4", 3.93e-3, 2.20e-4),
    ("Inception-ResNet-V2", 4.06e-3, 2.27e-4),
    ("ResNet-V2-50", 2.29e-3, 1.28e-4),
    ("ResNet-V2-152", 4.01e-3, 2.24e-4),
    ("VGG-16", 1.83e-3, 1.02e-4),
];

fn table_consistency() -> Outcome {
    let params = EmissionParams::default();
    let mut worst = 0.0f64;
    for (model, ec, ce) in INFERENCE_ROWS.iter().chain(&TRAINING_ROWS) {
        let oracle = ec * 55.0 / 1000.0;
        let got = compute_emissions(*ec, &params).co2_kg;
        check(rel(got, oracle) < 1e-12, format!("{model}: {got} vs oracle {oracle}"))?;
        let err = rel(got, *ce);
        check(err <= 0.035, format!("{model}: {got:.4e} vs table {ce:.4e} ({:.2}%)", err * 100.0))?;
        worst = worst.max(err);
    }
    Ok(format!("14 rows, worst relative error {:.2}%", worst * 100.0))
}

fn sampled(spec: &SimulatedTraceSpec, dt: f64, n: usize) -> Vec<PowerSample> {
    (0..=n)
        .map(|k| {
            let t = k as f64 * dt;
            PowerSample {
                t,
                watts: simulated_power_at(spec, t).unwrap(),
            }
        })
        .collect()
}

fn integration_accuracy() -> Outcome {
    let sine = SimulatedTraceSpec {
        segments: vec![Segment {
            duration_s: 30.0,
            shape: Shape::Sinusoid {
                mean_w: 50.0,
                amplitude_w: 50.0,
                period_s: 10.0,
            },
        }],
    };
    let ramp = SimulatedTraceSpec {
        segments: vec![Segment {
            duration_s: 30.0,
            shape: Shape::Ramp {
                from_w: 0.0,
                to_w: 100.0,
            },
        }],
    };
    let constant = SimulatedTraceSpec::constant(100.0, 30.0);
    let e_sine = integrate_power_trace(&sampled(&sine, 0.1, 300)).map_err(|e| e.to_string())?;
    let e_ramp = integrate_power_trace(&sampled(&ramp, 0.1, 300)).map_err(|e| e.to_string())?;
    let e_const = integrate_power_trace(&sampled(&constant, 0.1, 300)).map_err(|e| e.to_string())?;
    check(rel(e_sine, 1500.0) < 0.005, format!("sinusoid {e_sine} J"))?;
    check(rel(e_ramp, 1500.0) < 1e-9, format!("ramp {e_ramp} J"))?;
    check(rel(e_const, 3000.0) < 1e-12, format!("constant {e_const} J"))?;
    Ok(format!("sinusoid {e_sine:.4} J, ramp {e_ramp} J, constant {e_const} J"))
}

/// splitmix64
struct Rng(u64);

impl Rng {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }
}

fn counter_wrap_oracle() -> Outcome {
    let mut rng = Rng(20_240_601);
    let mut wraps = 0usize;
    for case in 0..1000 {
        let max = 1_000 + rng.below(1 << 40);
        let len = 2 + rng.below(60) as usize;
        // unwrapped counter; readings are its value modulo the range
        let mut unwrapped = rng.below(max) as u128;
        let mut readings = Vec::with_capacity(len);
        let mut expected = 0u128;
        for k in 0..len {
            if k > 0 {
                let step = if rng.below(4) == 0 {
                    // force a wrap where possible
                    let to_edge = max as u128 - unwrapped % max as u128;
                    (to_edge + rng.below(max / 2) as u128).min(max as u128 - 1)
                } else {
                    rng.below(max) as u128
                };
                unwrapped += step;
                expected += step;
            }
            readings.push(EnergyCounterReading {
                t: k as f64,
                energy_uj: (unwrapped % max as u128) as u64,
            });
        }
        wraps += readings.windows(2).filter(|w| w[1].energy_uj < w[0].energy_uj).count();
        let got = accumulate_counter_trace_uj(&readings, max).map_err(|e| format!("case {case}: {e}"))?;
        check(got == expected, format!("case {case}: got {got} uJ, expected {expected} uJ"))?;
    }
    check(wraps > 1000, format!("only {wraps} wraps exercised"))?;
    Ok(format!("1000 sequences exact, {wraps} wraps"))
}

const MODELS: [&str; 7] = [
    "MobileNet-V2",
    "Inception-V3",
    "Inception-V4",
    "Inception-ResNet-V2",
    "ResNet-V2-50",
    "ResNet-V2-152",
    "VGG-16",
];

fn orchestration_and_short_runs(out: &Path) -> (Outcome, Outcome) {
    let config = SuiteConfig {
        name: "classification-table1".into(),
        tests: MODELS.iter().map(|m| TestSpec::synthetic(m, Some(0.2))).collect(),
        repetitions: 3,
        warmup_runs: 1,
        interval_s: 0.05,
        interval_is_default: false,
        output_dir: Some(out.to_owned()),
        ..SuiteConfig::default()
    };
    let backend = Backend::simulated(SimulatedTraceSpec::constant(100.0, 3600.0)).unwrap();
    let outcome = match run_suite(&config, &backend) {
        Ok(o) => o,
        Err(e) => return (Err(e.to_string()), Err("suite did not run".into())),
    };
    let records = &outcome.records;

    let order = (|| {
        check(records.len() == 42, format!("{} records", records.len()))?;
        let mut expected = Vec::new();
        for rep in 1..=3 {
            for m in MODELS {
                expected.push((rep, m.to_string(), Phase::Training));
                expected.push((rep, m.to_string(), Phase::Inference));
            }
        }
        let got: Vec<_> = records
            .iter()
            .map(|r| (r.repetition_index, r.test_name.clone(), r.phase))
            .collect();
        check(got == expected, "records out of order")?;
        check(records.iter().all(|r| r.failure.is_none() && r.duration_s > 0.0), "failed record")?;
        let report = build_report(
            records.clone(),
            &config.emission,
            ReportMetadata::new(&config.name, "simulated", backend.descriptors(), config.interval_s),
        )
        .map_err(|e| e.to_string())?;
        let files = emit_report(&report, out).map_err(|e| e.to_string())?;
        let rows = parse_summary_csv(&fs::read_to_string(&files.summary_csv).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        check(rows.len() == 14, format!("summary.csv has {} rows", rows.len()))?;
        check(rows.iter().all(|r| r.n == 3), "group size is not 3")?;
        let training = rows.iter().filter(|r| r.phase == Phase::Training).count();
        check(training == 7, format!("{training} training rows"))?;
        Ok("42 records in order, summary.csv 14 rows".to_owned())
    })();

    let threshold = config.short_run_threshold_s;
    let short = (|| {
        for r in records {
            let warned = r.energy.warnings.iter().any(|w| w.starts_with("short run"));
            check(
                warned == (r.duration_s < threshold),
                format!("{} {}: {} s, warned={warned}", r.test_name, r.phase, r.duration_s),
            )?;
        }
        check(short_run_warning(threshold, threshold).is_none(), "warning at exactly the threshold")?;
        // boundary on replayed sessions: 60.0 s has no warning, 59.9 s has one
        for (span, want) in [(60.0, false), (59.9, true), (75.0, false)] {
            let reading = boundary_session(span)?;
            let warned = reading.iter().any(|w| w.starts_with("short run"));
            check(warned == want, format!("{span} s session: warned={warned}"))?;
        }
        Ok(format!("all 42 phases under {threshold} s warned; 60.0 s clean, 59.9 s warned"))
    })();
    (order, short)
}

fn boundary_session(span: f64) -> Result<Vec<String>, String> {
    let spec = SimulatedTraceSpec::constant(10.0, 3600.0);
    let source = SimulatedSource::new(0, spec).map_err(|e| e.to_string())?;
    let mut samples: Vec<PowerSample> = (0..=span.floor() as usize)
        .map(|k| PowerSample { t: k as f64, watts: 10.0 })
        .collect();
    if samples.last().is_some_and(|p| p.t < span) {
        samples.push(PowerSample { t: span, watts: 10.0 });
    }
    let mut header = TraceHeader::new("boundary", 1.0, vec![source.descriptor().clone()]);
    header.started_at = Some(0.0);
    header.stopped_at = Some(span);
    let session = TrackingSession::from_trace(
        RecordedTrace {
            header,
            logs: vec![SourceLog::Power(samples)],
        },
        None,
    )
    .map_err(|e| e.to_string())?;
    let r = session.reading().ok_or("no reading")?;
    check(r.duration_s == span, format!("duration {} for span {span}", r.duration_s))?;
    Ok(r.warnings.clone())
}

fn budget_watchdog() -> Outcome {
    let backend = Backend::simulated(SimulatedTraceSpec::constant(100.0, 3600.0)).unwrap();
    let catalog = ModelCatalog::builtin();
    let test = TestSpec {
        name: "sleeper".into(),
        workload: Workload::External {
            command: "sleep 6".into(),
            workdir: None,
        },
        phases: vec![Phase::Training],
        item_count: None,
    };
    let ctx = |limit: f64| PhaseContext {
        backend: &backend,
        catalog: &catalog,
        tracker: TrackerConfig {
            interval_s: 0.1,
            ..TrackerConfig::default()
        },
        emission: EmissionParams::default(),
        repetition: 1,
        budget: Some(EnergyBudget::new(limit, BudgetScope::PerPhase).unwrap()),
        budget_offset_joules: 0.0,
        grace: Duration::from_secs(5),
    };
    let stopped = run_phase(&test, Phase::Training, &ctx(500.0)).map_err(|e| e.to_string())?;
    check(stopped.stopped_by_budget, "500 J budget did not stop the phase")?;
    let b = stopped.budget_stop.ok_or("missing stop details")?;
    check((stopped.duration_s - 5.0).abs() <= 0.2, format!("stopped at {:.3} s", stopped.duration_s))?;
    check((b.signal_elapsed_s - 5.0).abs() <= 0.2, format!("signal at {:.3} s", b.signal_elapsed_s))?;
    check(
        b.overshoot_joules <= 10.0 + b.grace_energy_j,
        format!("overshoot {:.3} J > 10 J + grace {:.3} J", b.overshoot_joules, b.grace_energy_j),
    )?;
    check(!b.forced_kill, "sleep needed a forced kill")?;

    let free = run_phase(&test, Phase::Training, &ctx(10_000.0)).map_err(|e| e.to_string())?;
    check(!free.stopped_by_budget, "10 kJ budget stopped the phase")?;
    check(free.duration_s > 5.9, format!("unstopped phase ran {:.3} s", free.duration_s))?;
    Ok(format!(
        "stop at {:.3} s, overshoot {:.3} J (grace {:.3} J); 10 kJ budget untouched",
        stopped.duration_s, b.overshoot_joules, b.grace_energy_j
    ))
}

fn statistics_oracle() -> Outcome {
    let s = summarize(&[1.0, 2.0, 3.0]).map_err(|e| e.to_string())?;
    // t(0.975, 2) = 4.303 from the t table
    let oracle = 4.303 / 3f64.sqrt();
    check(s.mean == 2.0, format!("mean {}", s.mean))?;
    check(s.std == Some(1.0), format!("std {:?}", s.std))?;
    let ci = s.ci95_half_width.ok_or("no CI")?;
    check((ci - 2.484).abs() <= 0.001 && (ci - oracle).abs() <= 0.001, format!("ci {ci}"))?;
    let same = summarize(&[4.2; 10]).map_err(|e| e.to_string())?;
    check(same.ci95_half_width == Some(0.0), format!("identical values ci {:?}", same.ci95_half_width))?;
    check(same.n == 10 && same.mean == 4.2, "identical values mean")?;
    Ok(format!("[1,2,3]: mean 2, std 1, ci95 {ci:.4}; 10 identical: ci 0"))
}

fn replay_determinism(dir: &Path) -> Outcome {
    let traces = dir.join("traces");
    let spec = SimulatedTraceSpec {
        segments: vec![
            Segment {
                duration_s: 0.4,
                shape: Shape::Ramp {
                    from_w: 20.0,
                    to_w: 80.0,
                },
            },
            Segment {
                duration_s: 0.6,
                shape: Shape::Sinusoid {
                    mean_w: 60.0,
                    amplitude_w: 15.0,
                    period_s: 0.3,
                },
            },
        ],
    };
    let config = TrackerConfig {
        interval_s: 0.02,
        trace_dir: Some(traces.clone()),
        ..TrackerConfig::default()
    };
    fs::create_dir_all(&traces).map_err(|e| e.to_string())?;
    let source: Box<dyn PowerSource> = Box::new(SimulatedSource::new(0, spec).map_err(|e| e.to_string())?);
    let mut session = start_tracking_with(
        vec![source],
        &config,
        SessionOptions {
            session_id: Some("replay-check".into()),
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    thread::sleep(Duration::from_millis(700));
    let live = session.stop().map_err(|e| e.to_string())?;
    let path = session.trace_path().ok_or("trace not persisted")?.to_owned();

    let mut outputs = Vec::new();
    for i in 0..2 {
        let trace = read_trace(&path).map_err(|e| e.to_string())?;
        let meta = ReportMetadata::new("replay", "replay", trace.header.sources.clone(), trace.header.interval_s).fixed();
        let record = record_from_trace(trace, &EmissionParams::default(), None).map_err(|e| e.to_string())?;
        check(
            record.energy.total_joules.to_bits() == live.total_joules.to_bits(),
            format!("replayed {} J vs live {} J", record.energy.total_joules, live.total_joules),
        )?;
        let report = build_report(vec![record], &EmissionParams::default(), meta).map_err(|e| e.to_string())?;
        let out = dir.join(format!("out{i}"));
        let files = emit_report(&report, &out).map_err(|e| e.to_string())?;
        outputs.push(fs::read(files.report_json).map_err(|e| e.to_string())?);
    }
    check(outputs[0] == outputs[1], "report.json differs between replays")?;
    Ok(format!("{} J live = replay, report.json identical ({} bytes)", live.total_joules, outputs[0].len()))
}

fn write_atomic(path: &Path, body: &str) {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, body).unwrap();
    fs::rename(tmp, path).unwrap();
}

fn fixture_discovery(root: &Path) -> Outcome {
    let max = 262_143_328_850u64;
    let zones = [
        ("intel-rapl:0", "package-0", 1_000_000u64),
        ("intel-rapl:0:0", "core", 500_000),
        ("intel-rapl:1", "package-1", 2_000_000),
    ];
    for (dir, name, energy) in zones {
        let p = root.join(dir);
        fs::create_dir_all(&p).unwrap();
        fs::write(p.join("name"), format!("{name}\n")).unwrap();
        fs::write(p.join("energy_uj"), format!("{energy}\n")).unwrap();
        fs::write(p.join("max_energy_range_uj"), format!("{max}\n")).unwrap();
    }
    let found = discover_cpu_counters(root).map_err(|e| e.to_string())?;
    check(found.len() == 3, format!("{} descriptors", found.len()))?;
    let subs: Vec<_> = found.iter().filter(|d| d.is_subdomain()).collect();
    check(subs.len() == 1 && subs[0].id == "intel-rapl:0:0", "subdomain not flagged")?;
    check(subs[0].parent.as_deref() == Some("intel-rapl:0"), "subdomain parent")?;

    let sources: Vec<Box<dyn PowerSource>> = found
        .iter()
        .map(|d| Box::new(CpuCounterSource::new(d.clone()).unwrap()) as Box<dyn PowerSource>)
        .collect();
    let config = TrackerConfig {
        interval_s: 0.05,
        ..TrackerConfig::default()
    };
    let mut session = start_tracking(sources, &config).map_err(|e| e.to_string())?;
    // package-0 +1.5 J (core +0.4 J of it), package-1 +2.5 J
    write_atomic(&root.join("intel-rapl:0/energy_uj"), "2500000\n");
    write_atomic(&root.join("intel-rapl:0:0/energy_uj"), "900000\n");
    write_atomic(&root.join("intel-rapl:1/energy_uj"), "4500000\n");
    thread::sleep(Duration::from_millis(150));
    let r = session.stop().map_err(|e| e.to_string())?;
    check(r.total_joules == 4.0, format!("total {} J, expected 4.0", r.total_joules))?;
    check(r.subdomain_joules.get("intel-rapl:0:0") == Some(&0.4), "subdomain energy")?;
    check(r.per_source_joules.len() == 2, "subdomain counted as top-level")?;
    Ok("3 descriptors, 1 subdomain flagged, total 4.0 J excludes the 0.4 J subdomain".into())
}

fn report(n: usize, name: &str, started: Instant, outcome: &Outcome, failures: &mut usize) {
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => println!("criterion {n} PASS {name} ({secs:.2} s): {detail}"),
        Err(why) => {
            *failures += 1;
            println!("criterion {n} FAIL {name} ({secs:.2} s): {why}");
        }
    }
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut failures = 0;

    let t = Instant::now();
    report(1, "table consistency", t, &table_consistency(), &mut failures);
    let t = Instant::now();
    report(2, "integration accuracy", t, &integration_accuracy(), &mut failures);
    let t = Instant::now();
    report(3, "counter wrap oracle", t, &counter_wrap_oracle(), &mut failures);
    let t = Instant::now();
    let (order, short) = orchestration_and_short_runs(&dir.path().join("suite"));
    report(4, "orchestration order", t, &order, &mut failures);
    let t = Instant::now();
    report(5, "short-run warning", t, &short, &mut failures);
    let t = Instant::now();
    report(6, "budget watchdog", t, &budget_watchdog(), &mut failures);
    let t = Instant::now();
    report(7, "statistics oracle", t, &statistics_oracle(), &mut failures);
    let t = Instant::now();
    report(8, "replay determinism", t, &replay_determinism(&dir.path().join("replay")), &mut failures);
    let t = Instant::now();
    report(9, "fixture discovery", t, &fixture_discovery(&dir.path().join("powercap")), &mut failures);

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 9 acceptance criteria passed");
}
