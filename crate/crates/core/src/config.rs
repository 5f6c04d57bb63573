//! Suite configuration files.
//!
//! A suite file is TOML whose keys mirror [`SuiteConfig`]. Settings are
//! layered: command-line flag, then environment variable (both arrive via
//! [`SuiteOverrides`]), then the file, then built-in defaults.
//!
//! ```toml
//! name = "small"
//! repetitions = 3
//! interval_s = 0.5
//!
//! [emission]
//! pue = 1.2
//! carbon_intensity_g_per_kwh = 55.0
//!
//! [backend]
//! kind = "simulated"
//!
//! [[tests]]
//! name = "MobileNet-V2"
//! model = "MobileNet-V2"
//! work_scale = 0.5
//!
//! [[tests]]
//! name = "my-script"
//! command = "python train.py"
//! phases = ["training"]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accounting::report::ReportFormat;
use crate::accounting::EmissionParams;
use crate::harness::{
    BackendConfig, BackendKind, BudgetScope, EnergyBudget, HarnessError, ModelCatalogEntry, Phase, SuiteConfig,
    TestSpec, Workload, DEFAULT_GRACE_PERIOD_S, DEFAULT_REPETITIONS, DEFAULT_WARMUP_RUNS,
};
use crate::tracker::{DEFAULT_INTERVAL_S, DEFAULT_PLAUSIBLE_MAX_POWER_W, DEFAULT_SHORT_RUN_THRESHOLD_S};

/// Configs shipped inside the binary, addressable by name.
pub const BUILTIN_CONFIGS: &[(&str, &str)] = &[(
    "classification-table1",
    include_str!("../configs/classification-table1.toml"),
)];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {path} not found")]
    NotFound { path: PathBuf },
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: {source}")]
    Parse {
        origin: String,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("test {test:?}: {reason}")]
    Test { test: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmissionSection {
    pub pue: Option<f64>,
    pub carbon_intensity_g_per_kwh: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    pub limit_joules: f64,
    #[serde(default = "default_scope")]
    pub scope: BudgetScope,
}

fn default_scope() -> BudgetScope {
    BudgetScope::PerPhase
}

/// One `[[tests]]` entry: `model` for synthetic work or `command` for an
/// external one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFile {
    pub name: Option<String>,
    pub model: Option<String>,
    pub work_scale: Option<f64>,
    pub command: Option<String>,
    pub workdir: Option<PathBuf>,
    pub phases: Option<Vec<Phase>>,
    pub item_count: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteFile {
    pub name: Option<String>,
    pub repetitions: Option<u32>,
    pub warmup_runs: Option<u32>,
    pub interval_s: Option<f64>,
    pub short_run_threshold_s: Option<f64>,
    pub plausible_max_power_w: Option<f64>,
    pub grace_period_s: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub format: Option<ReportFormat>,
    /// Applied to every synthetic test without its own `work_scale`.
    pub work_scale: Option<f64>,
    #[serde(default)]
    pub emission: EmissionSection,
    #[serde(default)]
    pub backend: BackendConfig,
    pub budget: Option<BudgetSection>,
    #[serde(default)]
    pub models: Vec<ModelCatalogEntry>,
    #[serde(default)]
    pub tests: Vec<TestFile>,
}

/// Values from flags or the environment; `None` defers to the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuiteOverrides {
    pub backend: Option<BackendKind>,
    pub powercap_root: Option<PathBuf>,
    pub gpu_query: Option<String>,
    pub replay_trace: Option<PathBuf>,
    pub interval_s: Option<f64>,
    pub repetitions: Option<u32>,
    pub warmup_runs: Option<u32>,
    pub pue: Option<f64>,
    pub carbon_intensity: Option<f64>,
    pub budget_joules: Option<f64>,
    pub budget_scope: Option<BudgetScope>,
    pub work_scale: Option<f64>,
    pub output_dir: Option<PathBuf>,
}

pub fn parse_suite_file(text: &str, origin: &str) -> Result<SuiteFile, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Parse {
        origin: origin.to_owned(),
        source: Box::new(e),
    })
}

/// Load a suite file from `path`, or a built-in config when no such file
/// exists and the name matches one.
pub fn load_suite_file(path: &Path) -> Result<SuiteFile, ConfigError> {
    if !path.exists() {
        let name = path.to_string_lossy();
        let name = name.strip_suffix(".toml").unwrap_or(&name);
        if let Some((n, text)) = BUILTIN_CONFIGS.iter().find(|(n, _)| *n == name) {
            return parse_suite_file(text, &format!("built-in config {n}"));
        }
        return Err(ConfigError::NotFound { path: path.to_owned() });
    }
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_owned(),
        source,
    })?;
    parse_suite_file(&text, &path.display().to_string())
}

fn test_spec(t: &TestFile, index: usize, default_scale: Option<f64>) -> Result<TestSpec, ConfigError> {
    let label = t
        .name
        .clone()
        .or_else(|| t.model.clone())
        .unwrap_or_else(|| format!("tests[{index}]"));
    let bad = |reason: &str| ConfigError::Test {
        test: label.clone(),
        reason: reason.to_owned(),
    };
    let workload = match (&t.model, &t.command) {
        (Some(model), None) => {
            if t.workdir.is_some() {
                return Err(bad("workdir only applies to command workloads"));
            }
            Workload::Synthetic {
                model: model.clone(),
                work_scale: t.work_scale.or(default_scale),
            }
        }
        (None, Some(command)) => {
            if t.work_scale.is_some() {
                return Err(bad("work_scale only applies to model workloads"));
            }
            Workload::External {
                command: command.clone(),
                workdir: t.workdir.clone(),
            }
        }
        (Some(_), Some(_)) => return Err(bad("set either model or command, not both")),
        (None, None) => return Err(bad("needs a model or a command")),
    };
    let spec = TestSpec {
        name: label.clone(),
        workload,
        phases: t.phases.clone().unwrap_or_else(|| vec![Phase::Training, Phase::Inference]),
        item_count: t.item_count,
    };
    spec.validate().map_err(|e| match e {
        HarnessError::BadTest { test, reason } => ConfigError::Test { test, reason },
        other => ConfigError::Invalid(other.to_string()),
    })?;
    Ok(spec)
}

/// Merge overrides over the file over defaults and validate the result.
pub fn resolve(file: &SuiteFile, overrides: &SuiteOverrides) -> Result<SuiteConfig, ConfigError> {
    let default_scale = overrides.work_scale.or(file.work_scale);
    let mut tests = Vec::with_capacity(file.tests.len());
    for (i, t) in file.tests.iter().enumerate() {
        let mut spec = test_spec(t, i, default_scale)?;
        // a command-line work scale wins over per-test values too
        if let (Some(s), Workload::Synthetic { work_scale, .. }) = (overrides.work_scale, &mut spec.workload) {
            *work_scale = Some(s);
        }
        tests.push(spec);
    }

    let mut backend = file.backend.clone();
    if let Some(kind) = overrides.backend {
        backend.kind = Some(kind);
    }
    if let Some(root) = &overrides.powercap_root {
        backend.powercap_root = Some(root.clone());
    }
    if let Some(q) = &overrides.gpu_query {
        backend.gpu_query = Some(q.clone());
    }
    if let Some(p) = &overrides.replay_trace {
        backend.replay_trace = Some(p.clone());
    }

    let emission = EmissionParams {
        pue: overrides.pue.or(file.emission.pue).unwrap_or(crate::accounting::DEFAULT_PUE),
        carbon_intensity_g_per_kwh: overrides
            .carbon_intensity
            .or(file.emission.carbon_intensity_g_per_kwh)
            .unwrap_or(crate::accounting::DEFAULT_CARBON_INTENSITY_G_PER_KWH),
    };
    emission.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

    let limit = overrides.budget_joules.or(file.budget.as_ref().map(|b| b.limit_joules));
    let scope = overrides
        .budget_scope
        .or(file.budget.as_ref().map(|b| b.scope))
        .unwrap_or(BudgetScope::PerPhase);
    let budget = limit
        .map(|l| EnergyBudget::new(l, scope))
        .transpose()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;

    let interval = overrides.interval_s.or(file.interval_s);
    let config = SuiteConfig {
        name: file.name.clone().unwrap_or_else(|| "suite".into()),
        tests,
        repetitions: overrides.repetitions.or(file.repetitions).unwrap_or(DEFAULT_REPETITIONS),
        warmup_runs: overrides.warmup_runs.or(file.warmup_runs).unwrap_or(DEFAULT_WARMUP_RUNS),
        emission,
        backend,
        interval_s: interval.unwrap_or(DEFAULT_INTERVAL_S),
        interval_is_default: interval.is_none(),
        short_run_threshold_s: file.short_run_threshold_s.unwrap_or(DEFAULT_SHORT_RUN_THRESHOLD_S),
        plausible_max_power_w: file.plausible_max_power_w.unwrap_or(DEFAULT_PLAUSIBLE_MAX_POWER_W),
        grace_period_s: file.grace_period_s.unwrap_or(DEFAULT_GRACE_PERIOD_S),
        budget,
        models: file.models.clone(),
        output_dir: overrides.output_dir.clone().or_else(|| file.output_dir.clone()),
    };
    config.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_table1_suite() {
        let file = load_suite_file(Path::new("classification-table1")).unwrap();
        let c = resolve(&file, &SuiteOverrides::default()).unwrap();
        assert_eq!(c.tests.len(), 7);
        assert_eq!(c.repetitions, 10);
        assert!(c.interval_is_default);
        let names: Vec<_> = c.tests.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names[0], "MobileNet-V2");
        assert_eq!(names[6], "VGG-16");
        assert!(c
            .tests
            .iter()
            .all(|t| t.phases == [Phase::Training, Phase::Inference]
                && matches!(t.workload, Workload::Synthetic { work_scale: None, .. })));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_suite_file(Path::new("/nonexistent/suite.toml")),
            Err(ConfigError::NotFound { .. })
        ));
    }

    #[test]
    fn layers() {
        let file = parse_suite_file(
            "repetitions = 4\n[emission]\npue = 1.3\n[[tests]]\nmodel = \"VGG-16\"\n",
            "inline",
        )
        .unwrap();
        let c = resolve(&file, &SuiteOverrides::default()).unwrap();
        assert_eq!(c.repetitions, 4);
        assert_eq!(c.emission.pue, 1.3);
        assert_eq!(c.emission.carbon_intensity_g_per_kwh, 55.0);
        let c = resolve(
            &file,
            &SuiteOverrides {
                repetitions: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(c.repetitions, 2);
        assert_eq!(c.emission.pue, 1.3);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            parse_suite_file("repetitons = 3\n", "inline"),
            Err(ConfigError::Parse { .. })
        ));
    }

    #[test]
    fn bad_tests() {
        for body in [
            "[[tests]]\nname = \"x\"\n",
            "[[tests]]\nmodel = \"VGG-16\"\ncommand = \"true\"\n",
            "[[tests]]\nmodel = \"VGG-16\"\nphases = [\"inference\", \"training\"]\n",
            "[[tests]]\nmodel = \"VGG-16\"\nitem_count = 0\n",
        ] {
            let file = parse_suite_file(body, "inline").unwrap();
            assert!(matches!(resolve(&file, &SuiteOverrides::default()), Err(ConfigError::Test { .. })), "{body}");
        }
    }

    #[test]
    fn budget_and_models() {
        let file = parse_suite_file(
            "[budget]\nlimit_joules = 500.0\nscope = \"per-suite\"\n\
             [[models]]\nname = \"LSTM\"\nparameters_millions = 2.0\ntask = \"sentiment\"\n\
             [[tests]]\nmodel = \"LSTM\"\nwork_scale = 1.0\n",
            "inline",
        )
        .unwrap();
        let c = resolve(&file, &SuiteOverrides::default()).unwrap();
        assert_eq!(c.budget, Some(EnergyBudget::new(500.0, BudgetScope::PerSuite).unwrap()));
        let c = resolve(
            &file,
            &SuiteOverrides {
                budget_joules: Some(10.0),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(c.budget.unwrap().limit_joules, 10.0);
        assert_eq!(c.budget.unwrap().scope, BudgetScope::PerSuite);
    }

    #[test]
    fn unknown_model() {
        let file = parse_suite_file("[[tests]]\nmodel = \"AlexNet\"\n", "inline").unwrap();
        assert!(matches!(resolve(&file, &SuiteOverrides::default()), Err(ConfigError::Invalid(_))));
    }
}
