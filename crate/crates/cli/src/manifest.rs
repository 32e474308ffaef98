use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the canonical configuration text.
    pub config_hash: String,
    pub inputs: Vec<(PathBuf, String)>,
    pub seeds: Vec<u64>,
    pub version: String,
    pub wall_clock: Duration,
    pub outputs: Vec<(PathBuf, String)>,
}

impl RunManifest {
    pub fn new(command: &str, config_text: &str) -> Self {
        Self {
            command: command.into(),
            config_hash: sha256_hex(config_text.as_bytes()),
            inputs: Vec::new(),
            seeds: Vec::new(),
            version: env!("CARGO_PKG_VERSION").into(),
            wall_clock: Duration::ZERO,
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> std::io::Result<()> {
        let digest = file_digest(path)?;
        self.inputs.push((path.to_path_buf(), digest));
        Ok(())
    }

    /// Records an output file, shown relative to `base` when inside it.
    pub fn add_output(&mut self, path: &Path, base: &Path) -> std::io::Result<()> {
        let digest = file_digest(path)?;
        let shown = path.strip_prefix(base).unwrap_or(path).to_path_buf();
        self.outputs.push((shown, digest));
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "tool = spinn");
        let _ = writeln!(s, "version = {}", self.version);
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "config_sha256 = {}", self.config_hash);
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "seed = {}", seeds.join(", "));
        let _ = writeln!(s, "wall_clock_s = {:.3}", self.wall_clock.as_secs_f64());
        for (p, d) in &self.inputs {
            let _ = writeln!(s, "input = {} sha256:{d}", p.display());
        }
        for (p, d) in &self.outputs {
            let _ = writeln!(s, "output = {} sha256:{d}", p.display());
        }
        s
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_text())
    }
}
