//! NVIDIA GPU board power via `nvidia-smi`.

use std::process::Command;

use super::{PowerSample, PowerSource, PowerSourceDescriptor, Reading, SourceError, SourceKind};
use crate::clock::monotonic_now;

pub const DEFAULT_GPU_QUERY: &str = "nvidia-smi --query-gpu=index,power.draw --format=csv,noheader,nounits";

/// Shell command line producing one `index, watts` line per GPU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GpuQuery {
    command: String,
}

impl Default for GpuQuery {
    fn default() -> Self {
        Self::new(DEFAULT_GPU_QUERY)
    }
}

impl GpuQuery {
    pub fn new(command: impl Into<String>) -> Self {
        Self { command: command.into() }
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn run(&self) -> Result<String, SourceError> {
        let output = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .output()
            .map_err(|e| SourceError::GpuQuery {
                command: self.command.clone(),
                reason: e.to_string(),
                raw: String::new(),
            })?;
        let stdout = String::from_utf8_lossy(&output.stdout).into_owned();
        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            return Err(SourceError::GpuQuery {
                command: self.command.clone(),
                reason: format!("exited with {}: {}", output.status, stderr.trim()),
                raw: stdout,
            });
        }
        Ok(stdout)
    }

    fn parse(&self, raw: &str) -> Result<Vec<(u32, f64)>, SourceError> {
        parse_gpu_query_output(raw).map_err(|reason| SourceError::GpuQuery {
            command: self.command.clone(),
            reason,
            raw: raw.to_owned(),
        })
    }
}

/// Parse query output into `(gpu index, watts)` pairs.
///
/// Lines are `index, watts`; a line holding only a power value takes its
/// line position as index. `N/A` and similar placeholders are errors, never
/// zero samples.
pub fn parse_gpu_query_output(raw: &str) -> Result<Vec<(u32, f64)>, String> {
    let mut out = Vec::new();
    for (lineno, line) in raw.lines().map(str::trim).filter(|l| !l.is_empty()).enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let (index, power) = match fields.as_slice() {
            [power] => (lineno as u32, *power),
            [index, power] => {
                let index = index
                    .parse()
                    .map_err(|_| format!("line {}: bad gpu index {index:?}", lineno + 1))?;
                (index, *power)
            }
            _ => return Err(format!("line {}: expected `index, power`, got {line:?}", lineno + 1)),
        };
        let watts: f64 = power
            .parse()
            .map_err(|_| format!("line {}: power {power:?} is not a number", lineno + 1))?;
        if !watts.is_finite() || watts < 0.0 {
            return Err(format!("line {}: power {power:?} is not a nonnegative number", lineno + 1));
        }
        out.push((index, watts));
    }
    if out.is_empty() {
        return Err("no gpu lines in output".into());
    }
    Ok(out)
}

fn gpu_descriptor(index: u32) -> PowerSourceDescriptor {
    PowerSourceDescriptor {
        id: format!("gpu:{index}"),
        kind: SourceKind::GpuPower,
        label: format!("gpu-{index}"),
        max_energy_range_uj: None,
        parent: None,
        path: None,
    }
}

fn gpu_index(descriptor: &PowerSourceDescriptor) -> Result<u32, SourceError> {
    descriptor
        .id
        .strip_prefix("gpu:")
        .and_then(|s| s.parse().ok())
        .filter(|_| descriptor.kind == SourceKind::GpuPower)
        .ok_or_else(|| SourceError::Invalid {
            id: descriptor.id.clone(),
            reason: "not a gpu-power descriptor".into(),
        })
}

/// One descriptor per GPU line the query reports.
pub fn discover_gpus(query: &GpuQuery) -> Result<Vec<PowerSourceDescriptor>, SourceError> {
    let raw = query.run()?;
    let parsed = query.parse(&raw)?;
    Ok(parsed.into_iter().map(|(i, _)| gpu_descriptor(i)).collect())
}

pub fn poll_gpu_power(descriptor: &PowerSourceDescriptor, query: &GpuQuery) -> Result<PowerSample, SourceError> {
    let index = gpu_index(descriptor)?;
    let raw = query.run()?;
    let t = monotonic_now();
    let parsed = query.parse(&raw)?;
    let watts = parsed
        .into_iter()
        .find(|(i, _)| *i == index)
        .map(|(_, w)| w)
        .ok_or_else(|| SourceError::GpuQuery {
            command: query.command.clone(),
            reason: format!("gpu {index} missing from output"),
            raw,
        })?;
    Ok(PowerSample { t, watts })
}

pub struct GpuPowerSource {
    descriptor: PowerSourceDescriptor,
    query: GpuQuery,
}

impl GpuPowerSource {
    pub fn new(descriptor: PowerSourceDescriptor, query: GpuQuery) -> Result<Self, SourceError> {
        gpu_index(&descriptor)?;
        Ok(Self { descriptor, query })
    }
}

impl PowerSource for GpuPowerSource {
    fn descriptor(&self) -> &PowerSourceDescriptor {
        &self.descriptor
    }

    fn read(&mut self) -> Result<Reading, SourceError> {
        poll_gpu_power(&self.descriptor, &self.query).map(Reading::Power)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value() {
        assert_eq!(parse_gpu_query_output("87.34\n").unwrap(), vec![(0, 87.34)]);
    }

    #[test]
    fn not_available_is_an_error() {
        assert!(parse_gpu_query_output("N/A\n").is_err());
        assert!(parse_gpu_query_output("0, [N/A]\n").is_err());
        assert!(parse_gpu_query_output("").is_err());
    }

    #[test]
    fn two_gpus() {
        // captured from a two-GPU node
        let raw = "0, 57.21\n1, 243.90\n";
        assert_eq!(parse_gpu_query_output(raw).unwrap(), vec![(0, 57.21), (1, 243.90)]);

        let q = GpuQuery::new(format!("printf '{}'", raw.replace('\n', "\\n")));
        let gpus = discover_gpus(&q).unwrap();
        assert_eq!(gpus.len(), 2);
        assert_eq!(poll_gpu_power(&gpus[0], &q).unwrap().watts, 57.21);
        assert_eq!(poll_gpu_power(&gpus[1], &q).unwrap().watts, 243.90);
    }

    #[test]
    fn missing_tool_carries_diagnostics() {
        let q = GpuQuery::new("definitely-not-a-gpu-tool-xyz");
        match discover_gpus(&q) {
            Err(SourceError::GpuQuery { command, .. }) => assert!(command.contains("definitely-not")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_error_carries_raw_output() {
        let q = GpuQuery::new("echo 'N/A'");
        match poll_gpu_power(&gpu_descriptor(0), &q) {
            Err(SourceError::GpuQuery { raw, .. }) => assert_eq!(raw.trim(), "N/A"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
