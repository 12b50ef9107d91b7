//! Provenance stamped on every report: tool version, command and config hash.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(command: &str, config_sha256: String, seed: u64) -> Self {
        Self {
            tool: "pathsegkit",
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            config_sha256,
            seed,
        }
    }

    /// `# key=value ...` line placed above CSV headers.
    pub fn csv_comment(&self) -> String {
        format!(
            "# tool={} version={} command={} config_sha256={} seed={}\n",
            self.tool, self.version, self.command, self.config_sha256, self.seed
        )
    }

    /// `{"provenance": {...}}` line placed first in JSON-lines files.
    pub fn jsonl_line(&self) -> String {
        format!("{}\n", serde_json::json!({ "provenance": self }))
    }

    pub fn write_csv<R: Serialize>(&self, path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
        let mut file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        file.write_all(self.csv_comment().as_bytes())?;
        let mut writer = csv::Writer::from_writer(file);
        for row in rows {
            writer.serialize(row)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn write_jsonl<R: Serialize>(&self, path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
        let mut out = self.jsonl_line();
        for row in rows {
            out.push_str(&serde_json::to_string(&row)?);
            out.push('\n');
        }
        std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
    }

    /// Writes `value` (a JSON object) with a `provenance` field added.
    pub fn write_json(&self, path: &Path, value: impl Serialize) -> Result<()> {
        let mut value = serde_json::to_value(value)?;
        if let Some(obj) = value.as_object_mut() {
            obj.insert("provenance".into(), serde_json::to_value(self)?);
        }
        std::fs::write(path, serde_json::to_string_pretty(&value)? + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

