//! Output-directory layout, run logs, report tables, and the artifact
//! manifest.
//!
//! Reports and checkpoints are deterministic for a given spec; run logs carry
//! timestamps and wall-clock fields and are therefore listed in the manifest
//! without a hash.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fti_distill_core::analysis::{format_cell, AggregateRow};
use fti_distill_core::error::Result;
use fti_distill_core::training::RunResult;

pub struct OutputDirs {
    pub root: PathBuf,
    pub logs: PathBuf,
    pub reports: PathBuf,
    pub checkpoints: PathBuf,
}

impl OutputDirs {
    pub fn prepare(root: &Path) -> Result<Self> {
        let dirs = OutputDirs {
            root: root.to_path_buf(),
            logs: root.join("logs"),
            reports: root.join("reports"),
            checkpoints: root.join("checkpoints"),
        };
        for d in [&dirs.root, &dirs.logs, &dirs.reports, &dirs.checkpoints] {
            fs::create_dir_all(d)?;
        }
        Ok(dirs)
    }
}

/// One appended line of the run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLogRecord {
    /// Seconds since the Unix epoch at record creation.
    pub timestamp: u64,
    pub run_id: String,
    /// Hash of the fully resolved training configuration.
    pub config_hash: String,
    pub result: RunResult,
}

impl RunLogRecord {
    pub fn new(run_id: String, config_hash: String, result: RunResult) -> Self {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunLogRecord {
            timestamp,
            run_id,
            config_hash,
            result,
        }
    }
}

pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_string(config)
        .map_err(|e| fti_distill_core::Error::InvalidInput(format!("serialize config: {e}")))?;
    Ok(hex(&Sha256::digest(json.as_bytes())))
}

pub fn run_id(method: &str, budget: u64, lr: f64, seed: u64) -> String {
    format!("{method}_n{budget}_lr{lr}_s{seed}")
}

/// Append records as one JSON object per line.
pub fn append_run_log(path: &Path, records: &[RunLogRecord]) -> Result<()> {
    use std::io::Write;
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| fti_distill_core::Error::InvalidInput(format!("serialize log: {e}")))?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

pub fn read_run_log(path: &Path) -> Result<Vec<RunLogRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| {
                fti_distill_core::Error::InvalidInput(format!(
                    "{}: bad log line: {e}",
                    path.display()
                ))
            })
        })
        .collect()
}

/// Pivot aggregate rows into the method-by-budget accuracy table, cells in
/// `mean_{std}` percent form.
pub fn results_table(rows: &[AggregateRow], methods: &[&str], budgets: &[u64]) -> String {
    let mut cells: Vec<Vec<String>> = Vec::new();
    for &method in methods {
        let mut line = vec![method.to_string()];
        for &budget in budgets {
            let cell = rows
                .iter()
                .find(|r| r.method == method && r.budget == budget)
                .map(|r| format_cell(r.mean, r.std))
                .unwrap_or_else(|| "-".to_string());
            line.push(cell);
        }
        cells.push(line);
    }
    let mut header = vec!["method".to_string()];
    header.extend(budgets.iter().map(|b| format!("n={b}")));
    render_table(&header, &cells)
}

pub fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let emit = |out: &mut String, row: &[String]| {
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            let _ = write!(out, "{cell:<width$}", width = widths[i]);
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    emit(&mut out, header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    emit(&mut out, &rule);
    for row in rows {
        emit(&mut out, row);
    }
    let _ = cols;
    out
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn walk_files(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            walk_files(&path, base, out)?;
        } else {
            out.push(path.strip_prefix(base).unwrap().to_path_buf());
        }
    }
    Ok(())
}

/// Write `manifest.txt` at the output root: SHA-256 and path for every file
/// under `reports/` and `checkpoints/`, then log files listed without hashes.
pub fn write_manifest(dirs: &OutputDirs) -> Result<()> {
    let mut hashed = Vec::new();
    walk_files(&dirs.reports, &dirs.root, &mut hashed)?;
    walk_files(&dirs.checkpoints, &dirs.root, &mut hashed)?;
    hashed.sort();
    let mut logs = Vec::new();
    walk_files(&dirs.logs, &dirs.root, &mut logs)?;
    logs.sort();

    let mut out = String::new();
    for rel in &hashed {
        let bytes = fs::read(dirs.root.join(rel))?;
        let _ = writeln!(out, "{}  {}", hex(&Sha256::digest(&bytes)), rel.display());
    }
    for rel in &logs {
        let _ = writeln!(out, "{}  {}", "-".repeat(64), rel.display());
    }
    fs::write(dirs.root.join("manifest.txt"), out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rendering_is_aligned_and_stable() {
        let rows = vec![
            AggregateRow {
                method: "ce-only".into(),
                budget: 100,
                count: 3,
                mean: 41.2,
                std: 1.1,
            },
            AggregateRow {
                method: "ckd".into(),
                budget: 100,
                count: 3,
                mean: 45.05,
                std: 0.6,
            },
        ];
        let table = results_table(&rows, &["ce-only", "ckd"], &[100, 200]);
        assert!(table.contains("41.20_{1.10}"));
        assert!(table.contains("45.05_{0.60}"));
        assert!(table.contains("n=100"));
        // missing cells render as '-'
        assert!(table.lines().nth(2).unwrap().contains('-'));
        let again = results_table(&rows, &["ce-only", "ckd"], &[100, 200]);
        assert_eq!(table, again);
    }
}
