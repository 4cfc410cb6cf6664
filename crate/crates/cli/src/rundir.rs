//! Run-directory files: `config.json`, `metrics.csv`, `prune_log.jsonl`,
//! `checkpoints/` and `reports/`.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use mcft::eval::ResultRow;
use mcft::mcft::EpochMetrics;
use mcft::pruning::SalienceReport;
use serde::Serialize;

pub const METRICS_HEADER: &str = "epoch,phase,loss_align,loss_sup,loss_total,lr,eval_acc,\
loss_em,mask_rate,loss_inverse,loss_contrastive,loss_aha,active_layers,wall_ms";

/// Columns holding wall-clock measurements; excluded from reproducibility checks.
pub const TIMING_COLUMNS: &[&str] = &["wall_ms"];

pub fn create(dir: &Path) -> anyhow::Result<()> {
    for sub in ["checkpoints", "reports"] {
        fs::create_dir_all(dir.join(sub)).with_context(|| format!("creating {}", dir.join(sub).display()))?;
    }
    Ok(())
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn metrics_row(m: &EpochMetrics, active_layers: usize) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut row = format!(
        "{},{},{},{},{},{},{}",
        m.epoch,
        m.phase.name(),
        m.loss_align,
        m.loss_sup,
        m.loss_total,
        m.lr,
        opt(m.eval_acc)
    );
    let ssl = m.ssl.as_ref();
    for v in [
        ssl.map(|s| s.loss_em),
        ssl.map(|s| s.mask_rate),
        ssl.map(|s| s.loss_inverse),
        ssl.map(|s| s.loss_contrastive),
        ssl.map(|s| s.loss_aha),
    ] {
        let _ = write!(row, ",{}", opt(v));
    }
    let _ = write!(row, ",{active_layers},{}", m.wall_ms);
    row
}

/// Append-only, flushed-per-row epoch log.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> anyhow::Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(MetricsWriter { out })
    }

    pub fn append(&mut self, m: &EpochMetrics, active_layers: usize) -> std::io::Result<()> {
        writeln!(self.out, "{}", metrics_row(m, active_layers))?;
        self.out.flush()
    }
}

pub fn append_prune_record(path: &Path, report: &SalienceReport) -> std::io::Result<()> {
    let line = serde_json::to_string(report).map_err(std::io::Error::other)?;
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(file, "{line}")
}

/// Drops the timing columns so two logs can be compared byte for byte.
pub fn without_timing(csv: &str) -> String {
    let mut lines = csv.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let keep: Vec<bool> = header.split(',').map(|c| !TIMING_COLUMNS.contains(&c)).collect();
    let mut out = String::new();
    for line in std::iter::once(header).chain(lines) {
        let fields: Vec<&str> = line
            .split(',')
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(f, _)| f)
            .collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn results_path(run: &Path) -> PathBuf {
    run.join("reports").join("results.csv")
}

pub fn read_results(run: &Path) -> anyhow::Result<Vec<ResultRow>> {
    let path = results_path(run);
    let mut reader = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
    reader
        .deserialize()
        .map(|r| r.with_context(|| format!("parsing {}", path.display())))
        .collect()
}
