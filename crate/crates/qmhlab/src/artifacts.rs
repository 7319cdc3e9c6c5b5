//! Output-directory management: every file is stamped with the config
//! hash, a manifest records checksums, and partially written runs are
//! cleaned up instead of left behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::CliError;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub code_version: String,
    pub config_hash: String,
    pub mode: String,
    pub files: Vec<ManifestFile>,
}

/// A directory being filled by one run. Files registered here are
/// deleted again if the run fails before [`OutputSession::commit`].
pub struct Session {
    dir: PathBuf,
    pub hash: String,
    mode: &'static str,
    created: Vec<PathBuf>,
    committed: bool,
}

impl Session {
    /// Opens `dir` for a run with the given config hash. Refuses
    /// directories that already hold another experiment's artifacts:
    /// a manifest with a different hash, or unmanifested content.
    pub fn open(dir: &Path, hash: &str, mode: &'static str) -> Result<Self, CliError> {
        let manifest_path = dir.join("manifest.json");
        if manifest_path.exists() {
            let text = fs::read_to_string(&manifest_path)?;
            let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
                CliError::config(
                    "output_dir",
                    format!("existing manifest is unreadable: {e}"),
                )
            })?;
            if manifest.config_hash != hash {
                return Err(CliError::config(
                    "output_dir",
                    format!(
                        "{} holds artifacts of config {}; refusing to mix (use a fresh directory)",
                        dir.display(),
                        &manifest.config_hash[..12.min(manifest.config_hash.len())]
                    ),
                ));
            }
        } else if dir.exists() && fs::read_dir(dir)?.next().is_some() {
            return Err(CliError::config(
                "output_dir",
                format!(
                    "{} is not empty and has no manifest; refusing to write into it",
                    dir.display()
                ),
            ));
        }
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            hash: hash.to_string(),
            mode,
            created: Vec::new(),
            committed: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_of(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Registers a path for cleanup-on-failure before anything writes
    /// to it.
    pub fn register(&mut self, name: &str) -> PathBuf {
        let path = self.dir.join(name);
        self.created.push(path.clone());
        path
    }

    pub fn write_bytes(&mut self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        let path = self.register(name);
        fs::write(path, contents)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::Internal(format!("serializing {name}: {e}")))?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// Concatenates per-worker part files onto an already written
    /// header file, in the order given, removing the parts.
    pub fn merge_parts(&mut self, name: &str, parts: &[PathBuf]) -> Result<(), CliError> {
        let final_path = self.path_of(name);
        let mut out = fs::OpenOptions::new().append(true).open(&final_path)?;
        for part in parts {
            let bytes = fs::read(part)?;
            out.write_all(&bytes)?;
        }
        out.flush()?;
        for part in parts {
            fs::remove_file(part)?;
            self.created.retain(|p| p != part);
        }
        Ok(())
    }

    /// Writes the manifest over everything registered so far and marks
    /// the run complete.
    pub fn commit(&mut self) -> Result<(), CliError> {
        let mut files = Vec::new();
        for path in &self.created {
            let bytes = fs::read(path)?;
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            files.push(ManifestFile {
                name,
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        files.sort_by(|a, b| a.name.cmp(&b.name));
        let manifest = Manifest {
            format: "qmhlab-manifest".into(),
            code_version: CODE_VERSION.into(),
            config_hash: self.hash.clone(),
            mode: self.mode.into(),
            files,
        };
        let mut text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Internal(format!("serializing manifest: {e}")))?;
        text.push('\n');
        fs::write(self.dir.join("manifest.json"), text)?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for path in &self.created {
            let _ = fs::remove_file(path);
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex(&hasher.finalize())
}

/// Comment-style metadata lines every CSV artifact starts with.
pub fn csv_preamble(kind: &str, hash: &str, seed: u64, chains: u64) -> String {
    format!(
        "# qmhlab {kind}\n# config_hash={hash}\n# code_version={CODE_VERSION}\n# seed={seed} chains={chains}\n"
    )
}
