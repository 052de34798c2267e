//! Experiment manifest: everything needed to regenerate any output row.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::Config;
use super::{write_json, HarnessError, Result};
use crate::sampling::RNG_ALGORITHM;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn code_version() -> String {
    format!("chaoslab-core {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub config: Config,
    pub code_version: String,
    pub rng_algorithm: String,
    #[serde(rename = "N_grid")]
    pub n_grid: Vec<usize>,
    pub replicas: usize,
    pub base_seed: u64,
    pub timestamp_unix: u64,
    pub output_directory: PathBuf,
    /// SHA-256 over every field except the timestamp, the output directory
    /// (also inside the config) and the hash itself.
    pub hash: String,
}

#[derive(Serialize)]
struct Hashed<'a> {
    command: &'a str,
    config: &'a Config,
    code_version: &'a str,
    rng_algorithm: &'a str,
    n_grid: &'a [usize],
    replicas: usize,
    base_seed: u64,
}

impl ExperimentManifest {
    pub fn new(command: &str, config: &Config, n_grid: Vec<usize>, replicas: usize, base_seed: u64) -> Self {
        let timestamp_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let mut m = Self {
            command: command.to_string(),
            config: config.clone(),
            code_version: code_version(),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            n_grid,
            replicas,
            base_seed,
            timestamp_unix,
            output_directory: config.output.directory.clone(),
            hash: String::new(),
        };
        m.hash = m.compute_hash();
        m
    }

    pub fn compute_hash(&self) -> String {
        // where the outputs go does not change what they contain
        let mut config = self.config.clone();
        config.output.directory = PathBuf::new();
        let h = Hashed {
            command: &self.command,
            config: &config,
            code_version: &self.code_version,
            rng_algorithm: &self.rng_algorithm,
            n_grid: &self.n_grid,
            replicas: self.replicas,
            base_seed: self.base_seed,
        };
        let bytes = serde_json::to_vec(&h).expect("manifest serialises");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Stored hash matches the content.
    pub fn verify(&self) -> Result<()> {
        let h = self.compute_hash();
        if h != self.hash {
            return Err(HarnessError::Config(format!("manifest hash {} does not match its content ({h})", self.hash)));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        super::create_dir(dir)?;
        let path = dir.join(MANIFEST_FILE);
        write_json(&path, self)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("manifest {}: {e}", path.display())))?;
        m.config.validate()?;
        m.verify()?;
        Ok(m)
    }
}
