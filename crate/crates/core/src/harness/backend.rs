use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sources::gpu::DEFAULT_GPU_QUERY;
use crate::sources::powercap::{powercap_root_from_env, DiscoveryError};
use crate::sources::{
    discover_cpu_counters, discover_gpus, CpuCounterSource, GpuPowerSource, GpuQuery, PowerSource,
    PowerSourceDescriptor, ReplaySource, SimulatedSource, SimulatedTraceSpec, SourceError,
};
use crate::sources::simulated::SimulatedTraceError;
use crate::tracker::trace::{read_trace, RecordedTrace, TraceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Rapl,
    Simulated,
    Replay,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::Rapl => "rapl",
            BackendKind::Simulated => "simulated",
            BackendKind::Replay => "replay",
        })
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error(transparent)]
    Discovery(#[from] DiscoveryError),
    #[error("no energy sources found under {0} and no GPU available")]
    NoSources(PathBuf),
    #[error("simulated trace: {0}")]
    Simulated(#[from] SimulatedTraceError),
    #[error("replay trace: {0}")]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error("no backend selected (choose rapl, simulated or replay)")]
    Unselected,
    #[error("replay backend needs a trace file")]
    NoReplayTrace,
}

/// Source selection as written in a suite file or on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default)]
    pub kind: Option<BackendKind>,
    #[serde(default)]
    pub powercap_root: Option<PathBuf>,
    #[serde(default)]
    pub include_subdomains: bool,
    #[serde(default = "default_true")]
    pub gpu: bool,
    #[serde(default)]
    pub gpu_query: Option<String>,
    #[serde(default)]
    pub simulated: Option<SimulatedTraceSpec>,
    #[serde(default)]
    pub replay_trace: Option<PathBuf>,
}

fn default_true() -> bool {
    true
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: None,
            powercap_root: None,
            include_subdomains: false,
            gpu: true,
            gpu_query: None,
            simulated: None,
            replay_trace: None,
        }
    }
}

/// Constant 100 W for one hour, looped.
pub fn default_simulated_trace() -> SimulatedTraceSpec {
    SimulatedTraceSpec::constant(100.0, 3600.0)
}

/// Which sources each tracked phase observes.
#[derive(Debug, Clone)]
pub enum Backend {
    Rapl {
        powercap_root: PathBuf,
        cpu: Vec<PowerSourceDescriptor>,
        gpus: Vec<PowerSourceDescriptor>,
        gpu_query: Option<GpuQuery>,
        notes: Vec<String>,
    },
    Simulated {
        sources: Vec<SimulatedTraceSpec>,
    },
    Replay {
        path: PathBuf,
        trace: RecordedTrace,
    },
}

impl Backend {
    /// Discover RAPL domains under `powercap_root` and, when `gpu_query` is
    /// given, NVIDIA GPUs. A failing GPU query is recorded as a note.
    pub fn rapl(
        powercap_root: &Path,
        include_subdomains: bool,
        gpu_query: Option<GpuQuery>,
    ) -> Result<Self, BackendError> {
        let mut cpu = match discover_cpu_counters(powercap_root) {
            Ok(found) => found,
            Err(DiscoveryError::RootUnreadable { .. }) if gpu_query.is_some() => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        if !include_subdomains {
            cpu.retain(|d| !d.is_subdomain());
        }
        let mut notes = Vec::new();
        let gpus = match &gpu_query {
            Some(q) => discover_gpus(q).unwrap_or_else(|e| {
                notes.push(format!("gpu power unavailable: {e}"));
                Vec::new()
            }),
            None => Vec::new(),
        };
        if cpu.is_empty() && gpus.is_empty() {
            return Err(BackendError::NoSources(powercap_root.to_owned()));
        }
        Ok(Backend::Rapl {
            powercap_root: powercap_root.to_owned(),
            cpu,
            gpus,
            gpu_query,
            notes,
        })
    }

    pub fn from_config(config: &BackendConfig) -> Result<Self, BackendError> {
        match config.kind {
            None => Err(BackendError::Unselected),
            Some(BackendKind::Rapl) => {
                let root = config.powercap_root.clone().unwrap_or_else(powercap_root_from_env);
                let query = config.gpu.then(|| {
                    GpuQuery::new(config.gpu_query.clone().unwrap_or_else(|| DEFAULT_GPU_QUERY.to_owned()))
                });
                Self::rapl(&root, config.include_subdomains, query)
            }
            Some(BackendKind::Simulated) => {
                Self::simulated(config.simulated.clone().unwrap_or_else(default_simulated_trace))
            }
            Some(BackendKind::Replay) => match &config.replay_trace {
                Some(p) => Self::replay(p),
                None => Err(BackendError::NoReplayTrace),
            },
        }
    }

    pub fn simulated(spec: SimulatedTraceSpec) -> Result<Self, BackendError> {
        spec.validate()?;
        Ok(Backend::Simulated { sources: vec![spec] })
    }

    pub fn replay(path: &Path) -> Result<Self, BackendError> {
        let trace = read_trace(path)?;
        ReplaySource::all_from_trace(&trace)?;
        Ok(Backend::Replay {
            path: path.to_owned(),
            trace,
        })
    }

    pub fn kind(&self) -> BackendKind {
        match self {
            Backend::Rapl { .. } => BackendKind::Rapl,
            Backend::Simulated { .. } => BackendKind::Simulated,
            Backend::Replay { .. } => BackendKind::Replay,
        }
    }

    /// Fresh source instances for one tracking session.
    pub fn open_sources(&self) -> Result<Vec<Box<dyn PowerSource>>, BackendError> {
        let mut out: Vec<Box<dyn PowerSource>> = Vec::new();
        match self {
            Backend::Rapl { cpu, gpus, gpu_query, .. } => {
                for d in cpu {
                    out.push(Box::new(CpuCounterSource::new(d.clone())?));
                }
                if let Some(q) = gpu_query {
                    for d in gpus {
                        out.push(Box::new(GpuPowerSource::new(d.clone(), q.clone())?));
                    }
                }
            }
            Backend::Simulated { sources } => {
                for (i, spec) in sources.iter().enumerate() {
                    out.push(Box::new(SimulatedSource::new(i, spec.clone())?));
                }
            }
            Backend::Replay { trace, .. } => {
                for s in ReplaySource::all_from_trace(trace)? {
                    out.push(Box::new(s));
                }
            }
        }
        Ok(out)
    }

    pub fn descriptors(&self) -> Vec<PowerSourceDescriptor> {
        match self {
            Backend::Rapl { cpu, gpus, .. } => cpu.iter().chain(gpus).cloned().collect(),
            _ => self
                .open_sources()
                .map(|v| v.iter().map(|s| s.descriptor().clone()).collect())
                .unwrap_or_default(),
        }
    }

    pub fn notes(&self) -> Vec<String> {
        match self {
            Backend::Rapl { notes, .. } => notes.clone(),
            Backend::Simulated { .. } => vec!["simulated power backend: energies are synthetic".into()],
            Backend::Replay { path, .. } => vec![format!("power profile replayed from {}", path.display())],
        }
    }

    /// Open every source and read it once.
    pub fn check(&self) -> Result<(), BackendError> {
        for mut s in self.open_sources()? {
            s.read()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn zone(root: &Path, dir: &str, name: &str) {
        let p = root.join(dir);
        fs::create_dir_all(&p).unwrap();
        fs::write(p.join("name"), format!("{name}\n")).unwrap();
        fs::write(p.join("energy_uj"), "100\n").unwrap();
        fs::write(p.join("max_energy_range_uj"), "262143328850\n").unwrap();
    }

    #[test]
    fn rapl_filters_subdomains_by_default() {
        let dir = tempfile::tempdir().unwrap();
        zone(dir.path(), "intel-rapl:0", "package-0");
        zone(dir.path(), "intel-rapl:0:0", "core");
        let b = Backend::rapl(dir.path(), false, None).unwrap();
        assert_eq!(b.descriptors().len(), 1);
        let b = Backend::rapl(dir.path(), true, None).unwrap();
        assert_eq!(b.descriptors().len(), 2);
        b.check().unwrap();
    }

    #[test]
    fn rapl_without_sources_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Backend::rapl(dir.path(), false, None), Err(BackendError::NoSources(_))));
    }

    #[test]
    fn missing_gpu_tool_is_a_note() {
        let dir = tempfile::tempdir().unwrap();
        zone(dir.path(), "intel-rapl:0", "package-0");
        let b = Backend::rapl(dir.path(), false, Some(GpuQuery::new("no-such-gpu-tool-abc"))).unwrap();
        assert_eq!(b.descriptors().len(), 1);
        assert!(b.notes()[0].contains("gpu power unavailable"));
    }
}
