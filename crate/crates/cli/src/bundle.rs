//! Output bundles: files are staged in memory and written to a sibling
//! directory that is renamed into place only once everything succeeded.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct OutputRecord<'a> {
    file: &'a str,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a RunConfig,
    inputs: &'a [InputRecord],
    outputs: Vec<OutputRecord<'a>>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// The files a command produced, keyed by relative name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bundle {
    pub files: BTreeMap<String, Vec<u8>>,
    pub inputs: Vec<InputRecord>,
}

impl Bundle {
    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.insert(name.to_owned(), bytes);
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    /// Adds a file produced by a writer callback.
    pub fn add_with<F>(&mut self, name: &str, write: F) -> anyhow::Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> uqlink::Result<()>,
    {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.add(name, buf);
        Ok(())
    }

    pub fn record_input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(InputRecord {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn record_input_hash(&mut self, path: &Path, sha256: String) {
        self.inputs.push(InputRecord {
            path: path.display().to_string(),
            sha256,
        });
    }

    /// Manifest bytes: the config, input hashes and a hash per output file.
    pub fn manifest(&self, config: &RunConfig) -> anyhow::Result<Vec<u8>> {
        let manifest = Manifest {
            tool: "uqlink",
            version: env!("CARGO_PKG_VERSION"),
            command: &config.command,
            config,
            inputs: &self.inputs,
            outputs: self
                .files
                .iter()
                .map(|(name, bytes)| OutputRecord {
                    file: name,
                    bytes: bytes.len(),
                    sha256: sha256_hex(bytes),
                })
                .collect(),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    /// Writes every file plus the manifest under `out`.
    ///
    /// `out` must not exist unless `replace` is set. Nothing is left behind
    /// if writing fails.
    pub fn commit(&self, out: &Path, config: &RunConfig, replace: bool) -> anyhow::Result<PathBuf> {
        if out.exists() && !replace {
            bail!("output directory {} already exists (use --force to replace it)", out.display());
        }
        let parent = match out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let name = out
            .file_name()
            .with_context(|| format!("output path {} has no final component", out.display()))?;
        let staging = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
        let result = self.write_into(&staging, config);
        if let Err(e) = result {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
        if out.exists() {
            fs::remove_dir_all(out).with_context(|| format!("removing old {}", out.display()))?;
        }
        if let Err(e) = fs::rename(&staging, out) {
            let _ = fs::remove_dir_all(&staging);
            return Err(e).with_context(|| format!("moving outputs into {}", out.display()));
        }
        Ok(out.to_path_buf())
    }

    fn write_into(&self, dir: &Path, config: &RunConfig) -> anyhow::Result<()> {
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            if let Some(p) = path.parent() {
                fs::create_dir_all(p)?;
            }
            fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        }
        fs::write(dir.join(MANIFEST), self.manifest(config)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_writes_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let mut b = Bundle::default();
        b.add("a.txt", b"hello".to_vec());
        b.commit(&out, &RunConfig::default(), false).unwrap();
        assert_eq!(fs::read(out.join("a.txt")).unwrap(), b"hello");
        let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(manifest["outputs"][0]["sha256"], sha256_hex(b"hello"));
        assert!(b.commit(&out, &RunConfig::default(), false).is_err());
        b.commit(&out, &RunConfig::default(), true).unwrap();
    }

    #[test]
    fn failed_commit_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let mut b = Bundle::default();
        b.add("ok.txt", b"x".to_vec());
        // a file may not be nested under another file
        b.add("ok.txt/inner", b"y".to_vec());
        assert!(b.commit(&out, &RunConfig::default(), false).is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
