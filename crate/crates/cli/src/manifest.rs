//! Run manifests: what was run, on which data, producing which files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use rmih_core::data::write_bags;
use rmih_core::BagDataset;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// SHA-256 of the canonical serialisation of `ds`, so the fingerprint does
/// not depend on whitespace or number formatting in the source file.
pub fn fingerprint(ds: &BagDataset) -> Result<String> {
    let mut buf = Vec::new();
    write_bags(ds, &mut buf)?;
    Ok(hex::encode(Sha256::digest(&buf)))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub created_unix: u64,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    /// Role name → fingerprint, e.g. `train`, `queries`.
    pub datasets: BTreeMap<String, String>,
    pub artifacts: Vec<PathBuf>,
    /// Phase name → wall-clock seconds.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            seed: None,
            config: serde_json::Value::Null,
            datasets: BTreeMap::new(),
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn config<T: Serialize>(&mut self, cfg: &T) -> Result<()> {
        self.config = serde_json::to_value(cfg)?;
        Ok(())
    }

    pub fn dataset(&mut self, role: &str, ds: &BagDataset) -> Result<()> {
        self.datasets.insert(role.to_string(), fingerprint(ds)?);
        Ok(())
    }

    pub fn artifact(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    pub fn timing(&mut self, phase: &str, elapsed: Duration) {
        *self.timings.entry(phase.to_string()).or_default() += elapsed.as_secs_f64();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing manifest {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rmih_core::data::{generate_synthetic, read_bags, SyntheticSpec};
    use rmih_core::Rng;

    #[test]
    fn fingerprint_survives_reserialisation() {
        let ds = generate_synthetic(&mut Rng::new(4), &SyntheticSpec::default()).unwrap();
        let mut buf = Vec::new();
        write_bags(&ds, &mut buf).unwrap();
        let back = read_bags(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(fingerprint(&ds).unwrap(), fingerprint(&back).unwrap());
        let other = generate_synthetic(&mut Rng::new(5), &SyntheticSpec::default()).unwrap();
        assert_ne!(fingerprint(&ds).unwrap(), fingerprint(&other).unwrap());
    }
}
