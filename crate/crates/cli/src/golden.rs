use std::path::Path;

use serde_json::Value;
use ttsnn::tensor::io::write_atomic;

use crate::error::CliError;

const REL_TOL: f64 = 1e-9;

/// First difference between two JSON documents, numbers compared to a relative tolerance.
pub fn first_difference(got: &Value, want: &Value, path: &str) -> Option<String> {
    match (got, want) {
        (Value::Number(a), Value::Number(b)) => {
            let (a, b) = (a.as_f64()?, b.as_f64()?);
            ((a - b).abs() > REL_TOL * a.abs().max(b.abs())).then(|| format!("{path}: {a} != {b}"))
        }
        (Value::Array(a), Value::Array(b)) => {
            if a.len() != b.len() {
                return Some(format!("{path}: {} elements != {}", a.len(), b.len()));
            }
            a.iter().zip(b).enumerate().find_map(|(i, (x, y))| first_difference(x, y, &format!("{path}[{i}]")))
        }
        (Value::Object(a), Value::Object(b)) => {
            if let Some(k) = a.keys().chain(b.keys()).find(|k| !(a.contains_key(*k) && b.contains_key(*k))) {
                return Some(format!("{path}.{k}: present on one side only"));
            }
            a.iter().find_map(|(k, x)| first_difference(x, &b[k], &format!("{path}.{k}")))
        }
        _ => (got != want).then(|| format!("{path}: {got} != {want}")),
    }
}

/// Writes `value` to `path` when the file does not exist; otherwise compares against it.
pub fn check_or_write(path: &Path, value: &Value) -> Result<bool, CliError> {
    if !path.exists() {
        write_atomic(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())?;
        return Ok(false);
    }
    let text = std::fs::read_to_string(path)?;
    let want: Value =
        serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    match first_difference(value, &want, "$") {
        None => Ok(true),
        Some(d) => Err(CliError::runtime(format!("golden mismatch against {}: {d}", path.display()))),
    }
}
