//! Report envelope and serialization.
//!
//! Every subcommand emits exactly one document. Success reports carry
//! `schema_version`, the command name, an echo of the resolved inputs, a
//! metrics block, and a detail block; failures carry `schema_version`,
//! the command name, and an `error.message`. The committed schema in
//! `docs/report_schema.json` describes both shapes.
//!
//! serde_json's default map is a BTreeMap, so object keys serialize in
//! sorted order and equal reports are equal bytes. CSV output is the same
//! document flattened to `key,value` rows in that order.

use serde_json::{json, Value};

pub const SCHEMA_VERSION: u64 = 1;

/// Output serialization selected by `--format`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

impl std::fmt::Display for Format {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Format::Json => "json",
            Format::Csv => "csv",
        })
    }
}

/// The three per-command blocks of a success report.
pub struct ReportBody {
    pub inputs: Value,
    pub metrics: Value,
    pub detail: Value,
}

pub fn envelope(command: &str, body: &ReportBody) -> Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "inputs": body.inputs,
        "metrics": body.metrics,
        "detail": body.detail,
    })
}

pub fn error_envelope(command: &str, message: &str) -> Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "error": { "message": message },
    })
}

pub fn render(doc: &Value, format: Format) -> String {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(doc).expect("reports hold no non-finite floats");
            s.push('\n');
            s
        }
        Format::Csv => {
            let mut rows = Vec::new();
            flatten("", doc, &mut rows);
            let mut s = String::from("key,value\n");
            for (k, v) in rows {
                s.push_str(&csv_field(&k));
                s.push(',');
                s.push_str(&csv_field(&v));
                s.push('\n');
            }
            s
        }
    }
}

/// Depth-first walk emitting one row per scalar. Empty containers keep a
/// marker row so their key still appears in the flat view.
fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) => {
            if map.is_empty() {
                out.push((prefix.to_string(), "{}".to_string()));
            }
            for (k, v) in map {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&path, v, out);
            }
        }
        Value::Array(items) => {
            if items.is_empty() {
                out.push((prefix.to_string(), "[]".to_string()));
            }
            for (i, v) in items.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), v, out);
            }
        }
        Value::Null => out.push((prefix.to_string(), String::new())),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
