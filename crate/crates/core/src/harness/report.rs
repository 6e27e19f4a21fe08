use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::data::SnrReport;
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::experiments::{AblationReport, DemoGapReport, SweepReport, TimingRow, TreeReport};

/// Non-deterministic facts about a run. Written next to the payload, never inside it.
#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub command: String,
    pub git_hash: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub timings: Vec<TimingRow>,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn git_hash() -> String {
    Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_owned())
        .unwrap_or_else(|| "unknown".into())
}

impl Metadata {
    pub fn new(command: &str, started_unix: f64, timings: Vec<TimingRow>) -> Self {
        Self {
            command: command.into(),
            git_hash: git_hash(),
            started_unix,
            finished_unix: unix_now(),
            timings,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(format!("{}: {e}", path.display())))
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| io_err(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_text(path, &csv_string(rows)?)
}

/// Writes the resolved config and metadata shared by every experiment report.
fn write_common(dir: &Path, cfg: &ExperimentConfig, meta: &Metadata) -> Result<Vec<PathBuf>> {
    let cfg_path = dir.join("config.toml");
    write_text(&cfg_path, &cfg.to_toml_string())?;
    let meta_path = dir.join("metadata.json");
    write_json(&meta_path, meta)?;
    let timing_path = dir.join("timings.csv");
    write_csv(&timing_path, &meta.timings)?;
    Ok(vec![cfg_path, meta_path, timing_path])
}

pub fn write_sweep(dir: &Path, r: &SweepReport, meta: &Metadata) -> Result<Vec<PathBuf>> {
    let mut files = vec![
        dir.join("sweep.json"),
        dir.join("sweep_rows.csv"),
        dir.join("sweep_per_lambda.csv"),
        dir.join("sweep_best.csv"),
    ];
    write_json(&files[0], r)?;
    write_csv(&files[1], &r.rows)?;
    write_csv(&files[2], &r.per_lambda)?;
    write_csv(&files[3], r.best.as_slice())?;
    files.extend(write_common(dir, &r.config, meta)?);
    Ok(files)
}

pub fn write_ablation(dir: &Path, r: &AblationReport, meta: &Metadata) -> Result<Vec<PathBuf>> {
    let mut files = vec![
        dir.join("noise_ablation.json"),
        dir.join("noise_ablation.csv"),
        dir.join("noise_ablation_per_lambda.csv"),
        dir.join("noise_ablation_runs.csv"),
    ];
    write_json(&files[0], r)?;
    write_csv(&files[1], &r.rows)?;
    write_csv(&files[2], &r.per_lambda)?;
    write_csv(&files[3], &r.runs)?;
    files.extend(write_common(dir, &r.config, meta)?);
    Ok(files)
}

pub fn write_tree(dir: &Path, r: &TreeReport, meta: &Metadata) -> Result<Vec<PathBuf>> {
    let mut files = vec![
        dir.join("tree.json"),
        dir.join("tree_rows.csv"),
        dir.join("tree_summary.csv"),
    ];
    write_json(&files[0], r)?;
    write_csv(&files[1], &r.rows)?;
    write_csv(&files[2], &r.summary)?;
    files.extend(write_common(dir, &r.config, meta)?);
    Ok(files)
}

pub fn snr_csv(rows: &[SnrReport]) -> Result<String> {
    csv_string(rows)
}

pub fn write_demo_gap(dir: &Path, r: &DemoGapReport) -> Result<Vec<PathBuf>> {
    let files = vec![dir.join("demo_gap.csv"), dir.join("demo_gap.json")];
    write_csv(&files[0], &r.points)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        seed: u64,
        formula: &'a str,
        teacher_r2: f64,
        symbolic_r2: f64,
        tree_r2: f64,
        tree_leaves: usize,
    }
    write_json(
        &files[1],
        &Summary {
            seed: r.seed,
            formula: &r.formula,
            teacher_r2: r.teacher_r2,
            symbolic_r2: r.symbolic_r2,
            tree_r2: r.tree_r2,
            tree_leaves: r.tree_leaves,
        },
    )?;
    Ok(files)
}
