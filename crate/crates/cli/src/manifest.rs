use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Provenance record written next to every run's outputs. Timing lives here
/// and nowhere else so that the data files stay byte-identical.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config_path: String,
    pub config_sha256: String,
    pub seed: u64,
    pub threads: usize,
    pub defaults_applied: Vec<String>,
    pub wall_time_seconds: f64,
    pub exit_code: i32,
    pub outputs: Vec<OutputFile>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hashes the named files in `dir`, sorted by name.
pub fn inventory(dir: &Path, files: &[String]) -> std::io::Result<Vec<OutputFile>> {
    let mut names = files.to_vec();
    names.sort();
    names.dedup();
    names
        .into_iter()
        .map(|file| {
            let bytes = std::fs::read(dir.join(&file))?;
            Ok(OutputFile {
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
                file,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
