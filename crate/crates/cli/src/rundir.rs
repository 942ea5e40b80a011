//! Timestamped run directories with a hashed manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Incomplete,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    pub status: RunStatus,
    pub started_utc: String,
    pub finished_utc: Option<String>,
    pub versions: BTreeMap<String, String>,
    pub seed: Option<u64>,
    /// Derived stream seeds by tag.
    pub seeds: BTreeMap<String, u64>,
    pub threads: usize,
    pub config: Value,
    /// SHA-256 of every artifact, by file name.
    pub files: BTreeMap<String, String>,
    pub error: Option<String>,
}

pub struct RunDir {
    path: PathBuf,
    manifest: Manifest,
}

fn now() -> String {
    chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunDir {
    /// Creates `<root>/<timestamp>-<subcommand>` and writes an incomplete
    /// manifest straight away.
    pub fn create(root: &Path, subcommand: &str, seed: Option<u64>, config: Value) -> Result<Self, CliError> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string();
        let mut path = root.join(format!("{stamp}-{subcommand}"));
        let mut k = 1;
        while path.exists() {
            path = root.join(format!("{stamp}-{subcommand}-{k}"));
            k += 1;
        }
        std::fs::create_dir_all(&path)?;
        let mut versions = BTreeMap::new();
        versions.insert("uturn-cli".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("uturn-core".to_string(), uturn_core::VERSION.to_string());
        let manifest = Manifest {
            subcommand: subcommand.to_string(),
            status: RunStatus::Incomplete,
            started_utc: now(),
            finished_utc: None,
            versions,
            seed,
            seeds: BTreeMap::new(),
            threads: rayon::current_num_threads(),
            config,
            files: BTreeMap::new(),
            error: None,
        };
        let dir = Self { path, manifest };
        dir.write_manifest()?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn record_seed(&mut self, tag: &str, seed: u64) {
        self.manifest.seeds.insert(tag.to_string(), seed);
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.path.join(name);
        std::fs::write(&p, bytes)?;
        self.manifest.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Hashes a file some library call wrote into the directory.
    pub fn adopt(&mut self, name: &str) -> Result<(), CliError> {
        let bytes = std::fs::read(self.path.join(name))?;
        self.manifest.files.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn file_names(&self) -> Vec<String> {
        self.manifest.files.keys().cloned().collect()
    }

    fn write_manifest(&self) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(self.path.join(MANIFEST), text + "\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.manifest.status = RunStatus::Complete;
        self.manifest.finished_utc = Some(now());
        self.write_manifest()?;
        Ok(self.path)
    }

    /// Leaves the manifest incomplete with the failure recorded.
    pub fn abandon(mut self, err: &CliError) -> PathBuf {
        self.manifest.error = Some(err.to_string());
        self.manifest.finished_utc = Some(now());
        // The original error matters more than a failure to record it.
        let _ = self.write_manifest();
        self.path
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    Ok(serde_json::from_str(&text)?)
}

/// Files whose current hash differs from the manifest, or that are missing.
pub fn verify(dir: &Path, manifest: &Manifest) -> Vec<String> {
    manifest
        .files
        .iter()
        .filter(|(name, hash)| match std::fs::read(dir.join(name)) {
            Ok(bytes) => sha256_hex(&bytes) != **hash,
            Err(_) => true,
        })
        .map(|(name, _)| name.clone())
        .collect()
}
