use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;
use ttsnn::tensor::io::write_atomic;

use crate::error::CliError;

/// Report writer for one run directory.
pub struct RunDir {
    pub path: PathBuf,
    /// Drop wall-clock fields so repeated runs are byte-identical.
    pub no_timestamp: bool,
}

/// Keys holding wall-clock measurements.
const CLOCK_KEYS: [&str; 6] =
    ["created_unix", "seconds", "elapsed_seconds", "median_seconds", "min_seconds", "delta_seconds"];

fn strip_clock(v: &mut Value) {
    match v {
        Value::Object(m) => {
            for k in CLOCK_KEYS {
                m.remove(k);
            }
            m.values_mut().for_each(strip_clock);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_clock),
        _ => {}
    }
}

impl RunDir {
    pub fn create(path: &Path, no_timestamp: bool) -> Result<Self, CliError> {
        std::fs::create_dir_all(path)
            .map_err(|e| CliError::runtime(format!("cannot create output directory {}: {e}", path.display())))?;
        Ok(Self { path: path.to_path_buf(), no_timestamp })
    }

    /// Serialises `report` with a `created_unix` stamp (unless disabled) and writes it
    /// pretty-printed with a trailing newline.
    pub fn json<S: Serialize>(&self, name: &str, report: &S) -> Result<PathBuf, CliError> {
        let mut v = serde_json::to_value(report)?;
        if let Value::Object(m) = &mut v {
            let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            m.insert("created_unix".into(), now.into());
        }
        if self.no_timestamp {
            strip_clock(&mut v);
        }
        let p = self.path.join(name);
        write_atomic(&p, (serde_json::to_string_pretty(&v)? + "\n").as_bytes())?;
        Ok(p)
    }

    /// One JSON object per line, clock fields handled as in [`RunDir::json`].
    pub fn json_line<S: Serialize>(&self, rec: &S) -> Result<String, CliError> {
        let mut v = serde_json::to_value(rec)?;
        if self.no_timestamp {
            strip_clock(&mut v);
        }
        Ok(serde_json::to_string(&v)? + "\n")
    }

    pub fn text(&self, name: &str, body: &str) -> Result<PathBuf, CliError> {
        let p = self.path.join(name);
        write_atomic(&p, body.as_bytes())?;
        Ok(p)
    }
}
