// SPDX-License-Identifier: MIT OR Apache-2.0

//! Write-once output directories and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::Command;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    /// The parsed invocation, input paths made absolute.
    pub command: Command,
    pub config_hash: Option<String>,
    /// Effective configuration after flag overrides.
    pub config: Option<RunConfig>,
    pub seeds: BTreeMap<String, u64>,
    pub weight_hash: Option<String>,
    /// Absolute input path -> SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name -> SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.clone()),
            _ => Error::Io(e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn sha256_bytes(b: &[u8]) -> String {
    hex::encode(Sha256::digest(b))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(sha256_bytes(&bytes))
}

/// A fresh output directory. Every file is written exactly once and recorded.
#[derive(Debug)]
pub struct OutputDir {
    pub path: PathBuf,
    files: BTreeMap<String, String>,
}

impl OutputDir {
    /// Creates `path`; fails if it exists and is not empty.
    pub fn create(path: &Path) -> Result<Self> {
        if path.exists() {
            if !path.is_dir() || fs::read_dir(path)?.next().is_some() {
                return Err(Error::OutputExists(path.to_path_buf()));
            }
        } else {
            fs::create_dir_all(path)?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        if self.files.contains_key(name) || name == MANIFEST {
            return Err(Error::Config(format!("output `{name}` written twice")));
        }
        fs::write(self.path.join(name), bytes)?;
        self.files.insert(name.to_string(), sha256_bytes(bytes));
        Ok(())
    }

    /// Buffer a writer-based serializer and store the result.
    pub fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    /// Rows of a header-first CSV.
    pub fn write_rows(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        self.write_with(name, |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(header)?;
            for r in rows {
                w.write_record(r)?;
            }
            w.flush()?;
            Ok(())
        })
    }

    pub fn finish(self, mut manifest: Manifest) -> Result<Manifest> {
        manifest.outputs = self.files;
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(self.path.join(MANIFEST), text)?;
        Ok(manifest)
    }
}

/// Shortest round-trip formatting for CSV cells.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dir_is_write_once() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("run");
        let mut o = OutputDir::create(&p).unwrap();
        o.write("a.csv", b"x\n").unwrap();
        assert!(o.write("a.csv", b"y\n").is_err());
        assert!(matches!(OutputDir::create(&p), Err(Error::OutputExists(_))));
        // An existing empty directory is accepted.
        let e = tmp.path().join("empty");
        fs::create_dir(&e).unwrap();
        OutputDir::create(&e).unwrap();
    }
}
