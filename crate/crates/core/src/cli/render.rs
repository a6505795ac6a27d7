//! CSV and markdown rendering.

use serde::Serialize;

use super::CliError;

/// First line of every sweep-style CSV. Bump when columns change.
pub const SWEEP_SCHEMA: &str = "# schema: moe-dispatch-sweep/1";

pub const SWEEP_COLUMNS: [&str; 21] = [
    "model",
    "E",
    "k",
    "d",
    "d_ffn",
    "batch",
    "fused",
    "distribution",
    "alpha",
    "seed",
    "stage",
    "flops",
    "bytes",
    "ai",
    "verdict",
    "predicted_seconds",
    "max_over_mean",
    "gini",
    "active_experts",
    "launches_naive",
    "launches_pipeline",
];

/// One row of the sweep/skew CSV. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub model: String,
    #[serde(rename = "E")]
    pub num_experts: usize,
    pub k: usize,
    pub d: usize,
    pub d_ffn: usize,
    pub batch: usize,
    pub fused: &'static str,
    pub distribution: &'static str,
    pub alpha: f64,
    pub seed: u64,
    pub stage: &'static str,
    pub flops: u64,
    pub bytes: u64,
    pub ai: f64,
    pub verdict: &'static str,
    pub predicted_seconds: f64,
    pub max_over_mean: f64,
    pub gini: f64,
    pub active_experts: f64,
    pub launches_naive: u64,
    pub launches_pipeline: u64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String, CliError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(SWEEP_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let body = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
    let body = String::from_utf8(body).expect("csv output is utf-8");
    Ok(format!("{SWEEP_SCHEMA}\n{body}"))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Config(format!("csv: {e}"))
}

pub fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

pub fn md_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = format!("| {} |\n", headers.join(" | "));
    s.push_str(&format!("|{}\n", "---|".repeat(headers.len())));
    for r in rows {
        s.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    s
}

pub fn micros(seconds: f64) -> String {
    format!("{:.2}", seconds * 1e6)
}

pub fn on_off(fused: bool) -> &'static str {
    if fused {
        "on"
    } else {
        "off"
    }
}
