//! Run manifests: every command records its full configuration, input
//! hashes, output paths, and wall time next to its outputs, and every output
//! file points back at the manifest that produced it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fairflow_core::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation: enough to rerun it exactly and to
/// check that its inputs are unchanged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// the complete argument set, round-trippable by `rerun`
    pub config: serde_json::Value,
    pub seed: u64,
    pub code_version: String,
    /// input path -> hex SHA-256 of its content
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_seconds: f64,
}

/// Accumulates a [`RunManifest`] while a command runs and writes the
/// output files that reference it.
pub struct ManifestBuilder {
    manifest: RunManifest,
    out_dir: PathBuf,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(
        command: &str,
        config: &impl Serialize,
        seed: u64,
        out_dir: &Path,
    ) -> Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        Ok(Self {
            manifest: RunManifest {
                command: command.into(),
                config: serde_json::to_value(config)?,
                seed,
                code_version: env!("CARGO_PKG_VERSION").into(),
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                wall_seconds: 0.0,
            },
            out_dir: out_dir.to_path_buf(),
            started: Instant::now(),
        })
    }

    /// Hash one input file into the manifest.
    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_hex(path)?;
        self.manifest.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Note an output file written by someone else (model files, caches).
    pub fn record_output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    /// Path for a named output inside the run directory, recorded.
    pub fn output_path(&mut self, name: &str) -> PathBuf {
        let path = self.out_dir.join(name);
        self.record_output(&path);
        path
    }

    /// Write a JSON report carrying a `manifest` back-reference.
    pub fn json_report<T: Serialize>(&mut self, name: &str, body: &T) -> Result<PathBuf> {
        #[derive(Serialize)]
        struct WithManifest<'a, T: Serialize> {
            manifest: &'a str,
            #[serde(flatten)]
            body: &'a T,
        }
        let path = self.output_path(name);
        let mut text =
            serde_json::to_string_pretty(&WithManifest { manifest: MANIFEST_FILE, body })?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }

    /// Write a CSV report whose first line names the manifest.
    pub fn csv_report(&mut self, name: &str, header: &str, rows: &[String]) -> Result<PathBuf> {
        let path = self.output_path(name);
        let mut text = format!("# manifest: {MANIFEST_FILE}\n{header}\n");
        for row in rows {
            text.push_str(row);
            text.push('\n');
        }
        std::fs::write(&path, text)?;
        Ok(path)
    }

    /// Finalize wall time and write `manifest.json`.
    pub fn finish(mut self) -> Result<PathBuf> {
        self.manifest.wall_seconds = self.started.elapsed().as_secs_f64();
        let path = self.out_dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    if !path.exists() {
        return Err(Error::MissingInput(format!("{} (run manifest)", path.display())));
    }
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingInput(format!("{} (input file)", path.display())));
    }
    let mut hasher = Sha256::new();
    hasher.update(std::fs::read(path)?);
    Ok(format!("{:x}", hasher.finalize()))
}
