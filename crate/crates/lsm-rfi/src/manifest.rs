//! Run provenance. Every CLI invocation that writes an output directory also
//! writes a `manifest.json` there: the resolved flags, seeds, tool version,
//! and content hashes of the files it read and wrote. `reproduce` replays a
//! manifest into a fresh directory and verifies the output hashes match.
//!
//! Wall-clock columns are the one thing an honest re-run cannot reproduce,
//! so hashing treats any `seconds`/`total_seconds` field in reports and study
//! files as zero. Model weights, scores, and losses stay byte-exact.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::util;

/// Full record of one CLI run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// Subcommand name (`generate`, `train`, ...).
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    /// Every resolved flag, stringified, keyed by flag name.
    pub args: BTreeMap<String, String>,
    /// Input file → content hash at read time.
    pub inputs: BTreeMap<String, String>,
    /// Output file → normalized content hash (relative to the manifest dir).
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, threads: usize) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            threads,
            args: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn arg(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        self.args.insert(key.to_string(), value.to_string());
        self
    }

    pub fn record_input(&mut self, name: &str, path: &Path) -> Result<&mut Self> {
        self.inputs.insert(name.to_string(), util::sha256_file(path)?);
        Ok(self)
    }

    pub fn record_output(&mut self, name: &str, path: &Path) -> Result<&mut Self> {
        self.outputs.insert(name.to_string(), output_hash(path)?);
        Ok(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        util::atomic_write(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Compare two output-hash maps; returns one line per discrepancy, empty when
/// the runs agree.
pub fn diff_outputs(
    expected: &BTreeMap<String, String>,
    actual: &BTreeMap<String, String>,
) -> Vec<String> {
    let mut diffs = Vec::new();
    for (name, hash) in expected {
        match actual.get(name) {
            None => diffs.push(format!("{name}: missing from the new run")),
            Some(h) if h != hash => {
                diffs.push(format!("{name}: hash {h} != expected {hash}"))
            }
            Some(_) => {}
        }
    }
    for name in actual.keys() {
        if !expected.contains_key(name) {
            diffs.push(format!("{name}: not present in the original run"));
        }
    }
    diffs
}

/// Content hash of an output file with wall-clock fields normalized to zero.
/// CSV files lose their `seconds` column values; JSON and JSON-lines files
/// lose any numeric `seconds`/`total_seconds` members (recursively); other
/// files hash raw.
pub fn output_hash(path: &Path) -> Result<String> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let normalized: Vec<u8> = match ext {
        "csv" => normalize_csv(&read_text(path)?).into_bytes(),
        "json" => {
            let mut value: serde_json::Value = serde_json::from_str(&read_text(path)?)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            normalize_json(&mut value);
            serde_json::to_string(&value)?.into_bytes()
        }
        "jsonl" => {
            let mut out = String::new();
            for line in read_text(path)?.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                let mut value: serde_json::Value = serde_json::from_str(line)
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                normalize_json(&mut value);
                out.push_str(&serde_json::to_string(&value)?);
                out.push('\n');
            }
            out.into_bytes()
        }
        _ => return util::sha256_file(path),
    };
    Ok(util::sha256_hex(&normalized))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

const TIMING_KEYS: [&str; 2] = ["seconds", "total_seconds"];

fn normalize_json(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            for (key, v) in map.iter_mut() {
                if TIMING_KEYS.contains(&key.as_str()) && v.is_number() {
                    *v = serde_json::Value::from(0);
                } else {
                    normalize_json(v);
                }
            }
        }
        serde_json::Value::Array(items) => {
            for v in items {
                normalize_json(v);
            }
        }
        _ => {}
    }
}

fn normalize_csv(text: &str) -> String {
    let mut lines = text.lines();
    let Some(header) = lines.next() else { return String::new() };
    let columns: Vec<&str> = header.split(',').collect();
    let timing: Vec<usize> = columns
        .iter()
        .enumerate()
        .filter(|(_, c)| TIMING_KEYS.contains(c))
        .map(|(i, _)| i)
        .collect();
    if timing.is_empty() {
        return text.to_string();
    }
    let mut out = String::from(header);
    out.push('\n');
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let row: Vec<&str> = fields
            .iter()
            .enumerate()
            .map(|(i, f)| if timing.contains(&i) { "0" } else { *f })
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
