//! Run manifests: config snapshot plus an inventory of output files with
//! SHA-256 hashes, written as `key=value` lines.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::Result;

/// Manifest file name for a command, so commands sharing an output
/// directory keep separate inventories.
pub fn manifest_file(command: &str) -> String {
    format!("manifest.{command}.txt")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Resolved config lines (`key=value`).
    pub config: Vec<(String, String)>,
    /// `(file name relative to the run directory, sha256)`.
    pub files: Vec<(String, String)>,
    pub duration_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: config
                .lines()
                .filter_map(|l| l.split_once('='))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            files: Vec::new(),
            duration_seconds: 0.0,
        }
    }

    /// Writes `bytes` to `dir/name` and records its hash.
    pub fn write_file(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.files.push((name.to_string(), sha256_hex(bytes)));
        Ok(path)
    }

    pub fn hash_of(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, h)| h.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("command={}\nversion={}\nseed={}\n", self.command, self.version, self.seed);
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k}={v}");
        }
        for (n, h) in &self.files {
            let _ = writeln!(s, "file.{n}={h}");
        }
        let _ = writeln!(s, "duration_seconds={:.3}", self.duration_seconds);
        s
    }

    pub fn parse(text: &str) -> Option<Self> {
        let mut m = RunManifest::default();
        for line in text.lines() {
            let (k, v) = line.split_once('=')?;
            if let Some(c) = k.strip_prefix("config.") {
                m.config.push((c.to_string(), v.to_string()));
            } else if let Some(f) = k.strip_prefix("file.") {
                m.files.push((f.to_string(), v.to_string()));
            } else {
                match k {
                    "command" => m.command = v.to_string(),
                    "version" => m.version = v.to_string(),
                    "seed" => m.seed = v.parse().ok()?,
                    "duration_seconds" => m.duration_seconds = v.parse().ok()?,
                    _ => return None,
                }
            }
        }
        Some(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(manifest_file(&self.command)), self.to_text())?;
        Ok(())
    }

    pub fn load(dir: &Path, command: &str) -> Result<Self> {
        let text = fs::read_to_string(dir.join(manifest_file(command)))?;
        RunManifest::parse(&text).ok_or_else(|| crate::Error::invalid("manifest", "malformed manifest"))
    }

    /// Names of listed files that are missing or whose hash differs.
    pub fn verify(&self, dir: &Path) -> Vec<String> {
        self.files
            .iter()
            .filter(|(n, h)| fs::read(dir.join(n)).map(|b| sha256_hex(&b) != *h).unwrap_or(true))
            .map(|(n, _)| n.clone())
            .collect()
    }
}
