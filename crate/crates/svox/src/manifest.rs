//! Run manifests: every CLI command writes one, recording the command line,
//! seeds, input checksums, tool version, and wall-clock timings — enough to
//! reproduce the run. Manifests carry timings, so they are the one output
//! class that is not byte-stable across runs; all data artifacts are.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::formats::{fnv1a64, io_err, FormatError};

#[derive(Debug, Serialize)]
pub struct InputChecksum {
    pub path: String,
    pub fnv1a64: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub arguments: Vec<String>,
    pub seeds: Vec<(String, u64)>,
    pub input_checksums: Vec<InputChecksum>,
    pub tool_version: String,
    pub threads: usize,
    pub timings_ms: Vec<(String, f64)>,
    #[serde(skip)]
    started: Instant,
}

impl RunManifest {
    pub fn new(command: &str, threads: usize) -> Self {
        RunManifest {
            command: command.to_string(),
            arguments: std::env::args().skip(1).collect(),
            seeds: Vec::new(),
            input_checksums: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            threads,
            timings_ms: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn add_seed(&mut self, name: &str, seed: u64) {
        self.seeds.push((name.to_string(), seed));
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), FormatError> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        self.input_checksums.push(InputChecksum {
            path: path.display().to_string(),
            fnv1a64: format!("{:016x}", fnv1a64(&bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn add_timing(&mut self, what: &str, ms: f64) {
        self.timings_ms.push((what.to_string(), ms));
    }

    pub fn write(mut self, path: &Path) -> Result<(), FormatError> {
        self.add_timing("total", self.started.elapsed().as_secs_f64() * 1e3);
        let json = serde_json::to_vec_pretty(&self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|e| io_err(path, e))
    }
}
