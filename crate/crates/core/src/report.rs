//! Structured experiment records and table rendering.
//!
//! Every analysis artifact is persisted as line-delimited JSON records —
//! one object per line with `record_type` and `schema_version` fields and
//! a fingerprint of the run configuration — so result files are greppable,
//! diff-friendly, and byte-stable across reruns (nothing time-dependent is
//! ever recorded). Rendering helpers turn the core result types into
//! aligned plain-text tables and a fixed-column CSV.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compress::CostTable;
use crate::error::{Error, Result};
use crate::evalmetrics::ComparisonTable;
use crate::interp::{HypothesisTally, SweepResult};

/// Version stamped into every record; bump on any schema change.
pub const SCHEMA_VERSION: u32 = 1;

/// One persisted result: a typed, versioned JSON payload tied to the
/// configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    /// What the payload is (`"eval-report"`, `"skip-sweep"`, …).
    pub record_type: String,
    /// Schema version the payload was written under.
    pub schema_version: u32,
    /// Fingerprint of the run configuration (see [`config_fingerprint`]).
    pub config_hash: String,
    /// The serialized result object.
    pub payload: serde_json::Value,
}

impl Record {
    /// Wraps a serializable result.
    pub fn new<T: Serialize>(record_type: &str, config_hash: &str, payload: &T) -> Result<Record> {
        let payload = serde_json::to_value(payload)
            .map_err(|e| Error::Contract(format!("record payload serialization failed: {e}")))?;
        Ok(Record {
            record_type: record_type.to_string(),
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash.to_string(),
            payload,
        })
    }

    /// Deserializes the payload back into its concrete type.
    pub fn decode<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.payload.clone())
            .map_err(|e| Error::Contract(format!("record payload decode failed: {e}")))
    }
}

/// Short stable fingerprint of a configuration: the first 16 hex digits of
/// its SHA-256.
pub fn config_fingerprint(config_bytes: &[u8]) -> String {
    let digest = Sha256::digest(config_bytes);
    let mut hex = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        write!(hex, "{byte:02x}").expect("writing to a String cannot fail");
    }
    hex
}

/// Writes records as line-delimited JSON, one object per line. The output
/// is byte-deterministic: object keys come from struct field order and
/// sorted maps, and no clock is consulted.
pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut out = String::new();
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Contract(format!("record serialization failed: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a record file written by [`write_records`].
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| {
            Error::Contract(format!("{}:{}: bad record: {e}", path.display(), lineno + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}

/// The records of one type, in file order.
pub fn records_of_type<'r>(records: &'r [Record], record_type: &str) -> Vec<&'r Record> {
    records.iter().filter(|r| r.record_type == record_type).collect()
}

// ───────────────────────────────────────────────────────────────────────
// Table rendering
// ───────────────────────────────────────────────────────────────────────

/// Renders aligned columns: a header row, then data rows. The first column
/// is left-aligned, all others right-aligned.
fn render_columns(title: &str, header: &[&str], rows: &[Vec<String>]) -> String {
    let n = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    out.push_str(title);
    out.push('\n');
    let push_row = |cells: &[String], out: &mut String| {
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            if i == 0 {
                let _ = write!(out, "{cell:<width$}", width = widths[i]);
            } else {
                let _ = write!(out, "{cell:>width$}", width = widths[i]);
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    let header_cells: Vec<String> = header.iter().map(|h| h.to_string()).collect();
    push_row(&header_cells, &mut out);
    for row in rows {
        assert_eq!(row.len(), n, "ragged table row");
        push_row(row, &mut out);
    }
    out
}

/// Plain-text comparison table: rows ranked by score with cost fractions
/// against the baseline.
pub fn render_comparison(table: &ComparisonTable) -> String {
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            vec![
                r.model_id.clone(),
                r.recipe_id.clone(),
                format!("{:.4}", r.anls),
                format!("{:+.4}", r.anls_delta),
                format!("{:.4}", r.exact_match),
                format!("{:.4}", r.perplexity),
                r.param_count.to_string(),
                format!("{:.1}%", 100.0 * r.param_fraction),
                format!("{:.3e}", r.flops),
                format!("{:.1}%", 100.0 * r.flop_fraction),
            ]
        })
        .collect();
    render_columns(
        &format!("comparison on split {:?} (baseline {})", table.split_id, table.baseline_id),
        &["model", "recipe", "anls", "Δanls", "exact", "ppl", "params", "param%", "flops", "flop%"],
        &rows,
    )
}

/// Fixed-column CSV of a comparison table. Columns, in order:
/// `model_id,recipe_id,split_id,anls,anls_delta,exact_match,perplexity,
/// param_count,param_fraction,flops,flop_fraction`. Numeric cells carry
/// six significant decimals; the header line is always present.
pub fn comparison_csv(table: &ComparisonTable) -> String {
    let mut out = String::from(
        "model_id,recipe_id,split_id,anls,anls_delta,exact_match,perplexity,param_count,param_fraction,flops,flop_fraction\n",
    );
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.6e},{:.6}",
            csv_field(&r.model_id),
            csv_field(&r.recipe_id),
            csv_field(&table.split_id),
            r.anls,
            r.anls_delta,
            r.exact_match,
            r.perplexity,
            r.param_count,
            r.param_fraction,
            r.flops,
            r.flop_fraction,
        );
    }
    out
}

/// Quotes a CSV field only when it needs quoting.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Plain-text sweep table: per-intervention perplexity deltas sorted most
/// disruptive first, with a proportional bar for scanning.
pub fn render_sweep(title: &str, sweep: &SweepResult) -> String {
    let mut entries: Vec<(&String, f64)> =
        sweep.deltas.iter().map(|(k, &v)| (k, v)).collect();
    entries.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(b.0))
    });
    let max_mag = entries.iter().map(|(_, v)| v.abs()).fold(0.0, f64::max).max(1e-12);
    let rows: Vec<Vec<String>> = entries
        .iter()
        .map(|(name, delta)| {
            let bar_len = ((delta.abs() / max_mag) * 24.0).round() as usize;
            vec![
                (*name).clone(),
                format!("{delta:+.4}"),
                format!("{:+.2}%", 100.0 * delta / sweep.baseline),
                "#".repeat(bar_len),
            ]
        })
        .collect();
    render_columns(
        &format!(
            "{title} (split {:?}, {} samples, baseline perplexity {:.4})",
            sweep.split_id, sweep.sample_count, sweep.baseline
        ),
        &["intervention", "Δppl", "relative", ""],
        &rows,
    )
}

/// Plain-text hypothesis tally: the four retrieval labels with
/// percentages of accepted cases (summing to 100), rejected cases counted
/// separately, and the published full-scale percentages shown as
/// non-binding reference values.
pub fn render_tally(title: &str, tally: &HypothesisTally) -> String {
    let total = tally.total.max(1) as f64;
    let reference: [(&str, usize, f64); 4] = [
        ("positional", tally.positional, 53.0),
        ("semantic", tally.semantic, 31.0),
        ("memorization", tally.memorization, 8.0),
        ("failure", tally.failure, 8.0),
    ];
    let rows: Vec<Vec<String>> = reference
        .iter()
        .map(|(label, count, ref_pct)| {
            vec![
                label.to_string(),
                count.to_string(),
                format!("{:.1}%", 100.0 * *count as f64 / total),
                format!("{ref_pct:.0}%"),
            ]
        })
        .collect();
    let mut out = render_columns(
        &format!("{title} ({} accepted cases)", tally.total),
        &["label", "count", "share", "full-scale ref (non-binding)"],
        &rows,
    );
    let _ = writeln!(out, "rejected (degenerate, excluded from shares): {}", tally.rejected);
    out
}

/// Renders a cost table next to reference values with per-cell relative
/// error, for honest side-by-side accounting.
pub fn render_cost_diff(table: &CostTable, reference: &[(&str, f64)]) -> String {
    let mut rows = Vec::new();
    for &(module, target) in reference {
        let ours = table.row(module).map(|r| r.flops as f64).unwrap_or(f64::NAN);
        let rel = if target != 0.0 { ours / target - 1.0 } else { f64::NAN };
        rows.push(vec![
            module.to_string(),
            format!("{ours:.4e}"),
            format!("{target:.4e}"),
            format!("{:+.2}%", 100.0 * rel),
        ]);
    }
    let title = match &table.convention {
        Some(conv) => format!("{} vs reference [{conv}]", table.title),
        None => format!("{} vs reference", table.title),
    };
    render_columns(&title, &["module", "measured", "reference", "rel err"], &rows)
}
