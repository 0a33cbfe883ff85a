//! Output directory layout and the row/aggregate/manifest files.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

pub const ROWS_FILE: &str = "rows.csv";
pub const AGGREGATES_FILE: &str = "aggregates.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const FAILURE_FILE: &str = "FAILED";

/// Seed of one independent random stream; trial `i` draws from
/// `trial_rng(seed, i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stream {
    pub label: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub experiment: String,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seed: u64,
    pub trials: usize,
    pub config_sha256: String,
    pub config_file: String,
    pub rows_file: String,
    pub rows: usize,
    pub aggregates_file: String,
    pub streams: Vec<Stream>,
    pub workers: usize,
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn stream_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn path(dir: &Path, file: &str) -> PathBuf {
    dir.join(file)
}

/// CSV header of a row type, taken from a serialized default row so that it
/// is available even when there are no rows.
pub fn header<R: Serialize + Default>() -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(R::default())?;
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(text.lines().next().unwrap_or_default().to_string())
}

pub fn write_rows<R: Serialize + Default>(file: &Path, rows: &[R]) -> Result<()> {
    let mut out = header::<R>()?;
    out.push('\n');
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let body = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    out.push_str(&String::from_utf8(body).map_err(|e| CliError::Io(e.to_string()))?);
    std::fs::write(file, out).map_err(|e| CliError::Io(format!("{}: {e}", file.display())))
}

pub fn read_rows<R: DeserializeOwned>(file: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(file)
        .map_err(|e| CliError::Io(format!("{}: {e}", file.display())))?;
    r.deserialize()
        .map(|row| row.map_err(CliError::from))
        .collect()
}

pub fn write_json<T: Serialize>(file: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(file, text).map_err(|e| CliError::Io(format!("{}: {e}", file.display())))
}

pub fn read_json<T: DeserializeOwned>(file: &Path) -> Result<T> {
    let text = std::fs::read_to_string(file)
        .map_err(|e| CliError::Io(format!("{}: {e}", file.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Differences between two JSON documents, numbers compared to a relative
/// tolerance. Paths use `.field` and `[index]`.
pub fn json_differences(expected: &Value, actual: &Value, tol: f64) -> Vec<String> {
    let mut out = Vec::new();
    diff(expected, actual, tol, "", &mut out);
    out
}

fn diff(a: &Value, b: &Value, tol: f64, at: &str, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (
                x.as_f64().unwrap_or(f64::NAN),
                y.as_f64().unwrap_or(f64::NAN),
            );
            if (x - y).abs() > tol * x.abs().max(y.abs()).max(1e-300) {
                out.push(format!("{at}: recomputed {x}, stored {y}"));
            }
        }
        (Value::Object(x), Value::Object(y)) => {
            for (k, v) in x {
                match y.get(k) {
                    Some(w) => diff(v, w, tol, &format!("{at}.{k}"), out),
                    None => out.push(format!("{at}.{k}: missing from stored aggregates")),
                }
            }
            for k in y.keys().filter(|k| !x.contains_key(*k)) {
                out.push(format!("{at}.{k}: not produced by recomputation"));
            }
        }
        (Value::Array(x), Value::Array(y)) => {
            if x.len() != y.len() {
                out.push(format!(
                    "{at}: recomputed {} entries, stored {}",
                    x.len(),
                    y.len()
                ));
            }
            for (i, (v, w)) in x.iter().zip(y).enumerate() {
                diff(v, w, tol, &format!("{at}[{i}]"), out);
            }
        }
        _ if a == b => {}
        _ => out.push(format!("{at}: recomputed {a}, stored {b}")),
    }
}
