//! Intel RAPL energy counters through the Linux powercap tree.
//!
//! Layout: `<root>/intel-rapl:<N>/{name,energy_uj,max_energy_range_uj}` for
//! packages, and `<root>/intel-rapl:<N>:<M>/…` for their subdomains. The
//! kernel also nests subdomains below their package directory; both places
//! are scanned and deduplicated by id.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{EnergyCounterReading, PowerSource, PowerSourceDescriptor, Reading, SourceError, SourceKind};
use crate::clock::monotonic_now;

pub const DEFAULT_POWERCAP_ROOT: &str = "/sys/class/powercap";
pub const POWERCAP_ROOT_ENV: &str = "JM_POWERCAP_ROOT";

const ZONE_PREFIX: &str = "intel-rapl:";

/// Root from `JM_POWERCAP_ROOT`, else the kernel default.
pub fn powercap_root_from_env() -> PathBuf {
    std::env::var_os(POWERCAP_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_POWERCAP_ROOT))
}

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error("powercap root {root} is not readable: {source}")]
    RootUnreadable {
        root: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("powercap domain {path}: {reason}")]
    Domain { path: PathBuf, reason: String },
}

/// `intel-rapl:0:1` -> `[0, 1]`
fn zone_address(dir_name: &str) -> Option<Vec<u32>> {
    let rest = dir_name.strip_prefix(ZONE_PREFIX)?;
    rest.split(':').map(|p| p.parse().ok()).collect()
}

fn zone_id(address: &[u32]) -> String {
    let parts: Vec<String> = address.iter().map(u32::to_string).collect();
    format!("{ZONE_PREFIX}{}", parts.join(":"))
}

fn read_trimmed(path: &Path) -> Result<String, DiscoveryError> {
    fs::read_to_string(path)
        .map(|s| s.trim().to_owned())
        .map_err(|e| DiscoveryError::Domain {
            path: path.to_owned(),
            reason: e.to_string(),
        })
}

fn scan_zones(dir: &Path, found: &mut BTreeMap<Vec<u32>, PathBuf>) -> Result<(), std::io::Error> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(address) = name.to_str().and_then(zone_address) else {
            continue;
        };
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        if address.len() == 1 {
            // nested subdomains live inside the package directory
            let _ = scan_zones(&path, found);
        }
        found.entry(address).or_insert(path);
    }
    Ok(())
}

/// Enumerate RAPL domains under `root`.
///
/// Subdomains are returned with `parent` set to their package id. A root
/// that exists but holds no `intel-rapl:*` directories yields an empty list.
pub fn discover_cpu_counters(root: &Path) -> Result<Vec<PowerSourceDescriptor>, DiscoveryError> {
    let mut found = BTreeMap::new();
    scan_zones(root, &mut found).map_err(|source| DiscoveryError::RootUnreadable {
        root: root.to_owned(),
        source,
    })?;

    let mut out = Vec::with_capacity(found.len());
    for (address, path) in found {
        if address.len() > 2 {
            continue;
        }
        let label = read_trimmed(&path.join("name"))?;
        let range_path = path.join("max_energy_range_uj");
        let range_raw = read_trimmed(&range_path)?;
        let range: u64 = range_raw.parse().map_err(|_| DiscoveryError::Domain {
            path: range_path.clone(),
            reason: format!("max_energy_range_uj {range_raw:?} is not an unsigned integer"),
        })?;
        if range == 0 {
            return Err(DiscoveryError::Domain {
                path: range_path,
                reason: "max_energy_range_uj is zero".into(),
            });
        }
        if !path.join("energy_uj").is_file() {
            return Err(DiscoveryError::Domain {
                path: path.clone(),
                reason: "missing energy_uj".into(),
            });
        }
        let parent = (address.len() == 2).then(|| zone_id(&address[..1]));
        out.push(PowerSourceDescriptor {
            id: zone_id(&address),
            kind: SourceKind::CpuCounter,
            label,
            max_energy_range_uj: Some(range),
            parent,
            path: Some(path),
        });
    }
    Ok(out)
}

/// Read the current cumulative counter of a `cpu-counter` descriptor.
pub fn read_counter(descriptor: &PowerSourceDescriptor) -> Result<EnergyCounterReading, SourceError> {
    let (Some(dir), Some(max)) = (&descriptor.path, descriptor.max_energy_range_uj) else {
        return Err(SourceError::Invalid {
            id: descriptor.id.clone(),
            reason: "not a cpu-counter descriptor".into(),
        });
    };
    let path = dir.join("energy_uj");
    let raw = fs::read_to_string(&path).map_err(|source| SourceError::Read {
        id: descriptor.id.clone(),
        path: path.clone(),
        source,
    })?;
    let t = monotonic_now();
    let energy_uj: u64 = raw.trim().parse().map_err(|e: std::num::ParseIntError| SourceError::Parse {
        id: descriptor.id.clone(),
        raw: raw.clone(),
        reason: e.to_string(),
    })?;
    if energy_uj >= max {
        return Err(SourceError::OutOfRange {
            id: descriptor.id.clone(),
            value: energy_uj,
            max,
        });
    }
    Ok(EnergyCounterReading { t, energy_uj })
}

pub struct CpuCounterSource {
    descriptor: PowerSourceDescriptor,
}

impl CpuCounterSource {
    pub fn new(descriptor: PowerSourceDescriptor) -> Result<Self, SourceError> {
        descriptor.validate()?;
        if descriptor.kind != SourceKind::CpuCounter || descriptor.path.is_none() {
            return Err(SourceError::Invalid {
                id: descriptor.id,
                reason: "not a cpu-counter descriptor".into(),
            });
        }
        Ok(Self { descriptor })
    }
}

impl PowerSource for CpuCounterSource {
    fn descriptor(&self) -> &PowerSourceDescriptor {
        &self.descriptor
    }

    fn read(&mut self) -> Result<Reading, SourceError> {
        read_counter(&self.descriptor).map(Reading::Counter)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zone(root: &Path, dir: &str, name: &str, energy: u64, max: u64) {
        let p = root.join(dir);
        fs::create_dir_all(&p).unwrap();
        fs::write(p.join("name"), format!("{name}\n")).unwrap();
        fs::write(p.join("energy_uj"), format!("{energy}\n")).unwrap();
        fs::write(p.join("max_energy_range_uj"), format!("{max}\n")).unwrap();
    }

    #[test]
    fn two_packages() {
        let dir = tempfile::tempdir().unwrap();
        zone(dir.path(), "intel-rapl:0", "package-0", 10, 262_143_328_850);
        zone(dir.path(), "intel-rapl:1", "package-1", 20, 65_532_610_987);
        let found = discover_cpu_counters(dir.path()).unwrap();
        assert_eq!(found.len(), 2);
        assert_eq!(found[0].id, "intel-rapl:0");
        assert_eq!(found[0].label, "package-0");
        assert_eq!(found[0].max_energy_range_uj, Some(262_143_328_850));
        assert_eq!(found[1].max_energy_range_uj, Some(65_532_610_987));
        assert!(found.iter().all(|d| d.parent.is_none()));
    }

    #[test]
    fn empty_root_is_not_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(discover_cpu_counters(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn missing_root_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = discover_cpu_counters(&dir.path().join("nope")).unwrap_err();
        assert!(matches!(err, DiscoveryError::RootUnreadable { .. }));
    }

    #[test]
    fn subdomain_flagged() {
        let dir = tempfile::tempdir().unwrap();
        zone(dir.path(), "intel-rapl:0", "package-0", 10, 1000);
        zone(dir.path(), "intel-rapl:0:0", "core", 5, 1000);
        let found = discover_cpu_counters(dir.path()).unwrap();
        assert_eq!(found.len(), 2);
        assert_eq!(found[0].parent, None);
        assert_eq!(found[1].id, "intel-rapl:0:0");
        assert_eq!(found[1].parent.as_deref(), Some("intel-rapl:0"));
    }

    #[test]
    fn nested_kernel_layout_deduplicated() {
        let dir = tempfile::tempdir().unwrap();
        zone(dir.path(), "intel-rapl:0", "package-0", 10, 1000);
        zone(dir.path(), "intel-rapl:0/intel-rapl:0:1", "dram", 5, 1000);
        // the control-type directory and mmio zones are ignored
        fs::create_dir_all(dir.path().join("intel-rapl")).unwrap();
        zone(dir.path(), "intel-rapl-mmio:0", "package-0", 1, 1000);
        let found = discover_cpu_counters(dir.path()).unwrap();
        let ids: Vec<_> = found.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["intel-rapl:0", "intel-rapl:0:1"]);
        assert_eq!(found[1].label, "dram");
    }

    #[test]
    fn read_counter_value() {
        let dir = tempfile::tempdir().unwrap();
        zone(dir.path(), "intel-rapl:0", "package-0", 12345, 1_000_000);
        let d = discover_cpu_counters(dir.path()).unwrap().remove(0);
        let a = read_counter(&d).unwrap();
        assert_eq!(a.energy_uj, 12345);
        let b = read_counter(&d).unwrap();
        assert!(b.t > a.t);
    }

    #[test]
    fn read_counter_rejects_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        zone(dir.path(), "intel-rapl:0", "package-0", 5, 1000);
        let d = discover_cpu_counters(dir.path()).unwrap().remove(0);
        fs::write(dir.path().join("intel-rapl:0/energy_uj"), "1000\n").unwrap();
        assert!(matches!(read_counter(&d), Err(SourceError::OutOfRange { value: 1000, .. })));
    }

    #[test]
    fn read_counter_vanished_source() {
        let dir = tempfile::tempdir().unwrap();
        zone(dir.path(), "intel-rapl:0", "package-0", 5, 1000);
        let d = discover_cpu_counters(dir.path()).unwrap().remove(0);
        fs::remove_dir_all(dir.path().join("intel-rapl:0")).unwrap();
        match read_counter(&d) {
            Err(SourceError::Read { id, .. }) => assert_eq!(id, "intel-rapl:0"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
