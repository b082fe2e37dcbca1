//! Plain-text and JSON rendering of metric rows.

use serde::{Deserialize, Serialize};

use super::eval::MetricsReport;
use crate::error::{MimoError, Result};

fn pct(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |a| format!("{a:.2}"))
}

/// Aligned table with the columns Acc./task1, Acc./task2, Par., Mem.,
/// FLOPs and Latency.
pub fn render_table(rows: &[MetricsReport]) -> String {
    let header = [
        "Stage",
        "Acc./task1",
        "Acc./task2",
        "Par.",
        "Mem.(KiB)",
        "FLOPs",
        "Latency(ms)",
    ];
    let cells: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.stage.clone(),
                pct(r.acc_task1),
                pct(r.acc_task2),
                r.params.to_string(),
                format!("{:.1}", r.memory_bytes as f64 / 1024.0),
                r.flops.to_string(),
                format!("{:.3}", r.latency_ms),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cols: Vec<&str>| {
        for (i, (c, w)) in cols.iter().zip(&widths).enumerate() {
            if i == 0 {
                out.push_str(&format!("{c:<w$}"));
            } else {
                out.push_str(&format!("  {c:>w$}"));
            }
        }
        out.push('\n');
    };
    line(&mut out, header.to_vec());
    for row in &cells {
        line(&mut out, row.iter().map(String::as_str).collect());
    }
    out.push_str("Mem. is analytic (weights + peak activations), not process resident memory.\n");
    out.push_str("FLOPs and latency are the efficiency proxies; energy is not measured.\n");
    out
}

#[derive(Serialize, Deserialize)]
struct JsonReport<'a> {
    rows: std::borrow::Cow<'a, [MetricsReport]>,
}

pub fn render_json(rows: &[MetricsReport]) -> Result<String> {
    serde_json::to_string_pretty(&JsonReport { rows: rows.into() })
        .map_err(|e| MimoError::Usage(format!("cannot encode report: {e}")))
}

pub fn parse_json(text: &str) -> Result<Vec<MetricsReport>> {
    let r: JsonReport =
        serde_json::from_str(text).map_err(|e| MimoError::Config(format!("bad report: {e}")))?;
    Ok(r.rows.into_owned())
}
