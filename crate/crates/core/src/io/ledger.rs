//! Append-only results ledger (`ledger.jsonl` in the output directory).

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::config::RunConfig;
use super::container::write_atomic;
use crate::error::{Error, Result};

pub const LEDGER_FILE: &str = "ledger.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub metrics: Map<String, Value>,
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
    pub unix_time: u64,
}

impl LedgerEntry {
    pub fn new(command: &str, config: &RunConfig, metrics: Map<String, Value>, artifacts: Vec<String>, wall_clock_seconds: f64) -> Self {
        Self {
            command: command.to_owned(),
            config_hash: config.hash(),
            seed: config.seed,
            config: config.clone(),
            metrics,
            artifacts,
            wall_clock_seconds,
            unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }
}

pub fn append(out_dir: &Path, entry: &LedgerEntry) -> Result<()> {
    let path = out_dir.join(LEDGER_FILE);
    let mut text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(e.into()),
    };
    text.push_str(&serde_json::to_string(entry).expect("ledger entry serializes"));
    text.push('\n');
    write_atomic(&path, text.as_bytes())
}

pub fn read(out_dir: &Path) -> Result<Vec<LedgerEntry>> {
    let text = std::fs::read_to_string(out_dir.join(LEDGER_FILE))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema { path: format!("ledger line {}", i + 1), msg: e.to_string() })
        })
        .collect()
}
