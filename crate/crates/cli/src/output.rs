//! Files written into a run directory.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use pflego_core::orchestrator::{window_stats, RoundReport, WindowStats};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::UsageError;

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Rounds averaged for the final-window statistics.
pub const FINAL_WINDOW: usize = 10;

pub const HEADER: [&str; 6] = [
    "round",
    "global_train_loss",
    "mean_test_accuracy",
    "participants",
    "forward_passes_total",
    "wall_time_s",
];

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// One `rounds.csv` line.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Row {
    pub round: u64,
    pub global_train_loss: f64,
    pub mean_test_accuracy: f64,
    /// Participant ids separated by `;`.
    pub participants: String,
    pub forward_passes_total: u64,
    pub wall_time_s: Option<f64>,
}

pub struct RoundsWriter {
    inner: csv::Writer<File>,
    wall_time: bool,
}

impl RoundsWriter {
    pub fn create(path: &Path, wall_time: bool) -> anyhow::Result<Self> {
        let mut inner =
            csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        inner.write_record(HEADER)?;
        inner.flush()?;
        Ok(Self { inner, wall_time })
    }

    pub fn write(&mut self, r: &RoundReport) -> anyhow::Result<()> {
        let participants: Vec<String> = r.participants.iter().map(usize::to_string).collect();
        let wall = if self.wall_time {
            format_float(r.wall_time)
        } else {
            String::new()
        };
        self.inner.write_record([
            r.round.to_string(),
            format_float(r.global_train_loss),
            format_float(r.mean_test_accuracy),
            participants.join(";"),
            r.forward_passes_total().to_string(),
            wall,
        ])?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_rounds(dir: &Path) -> anyhow::Result<Vec<Row>> {
    let path = dir.join(ROUNDS_FILE);
    if !path.is_file() {
        return Err(UsageError(format!("{} not found", path.display())).into());
    }
    let mut reader = csv::Reader::from_path(&path)?;
    let rows = reader
        .deserialize()
        .collect::<Result<Vec<Row>, _>>()
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stddev: f64,
}

impl From<WindowStats> for Stat {
    fn from(w: WindowStats) -> Self {
        Self {
            mean: w.mean,
            stddev: w.stddev,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: String,
    pub seed: u64,
    pub rounds: u64,
    pub evaluated_rounds: usize,
    /// Evaluated rounds in the final window.
    pub window: usize,
    pub spread: String,
    pub final_global_train_loss: f64,
    pub final_mean_test_accuracy: f64,
    pub global_train_loss: Stat,
    pub mean_test_accuracy: Stat,
    pub forward_passes_total: u64,
}

impl Summary {
    pub fn from_reports(cfg: &RunConfig, reports: &[RoundReport]) -> anyhow::Result<Self> {
        let last = reports.last().context("run produced no reports")?;
        let n = FINAL_WINDOW.min(reports.len());
        let tail = &reports[reports.len() - n..];
        let loss: Vec<f64> = tail.iter().map(|r| r.global_train_loss).collect();
        let acc: Vec<f64> = tail.iter().map(|r| r.mean_test_accuracy).collect();
        Ok(Self {
            algorithm: cfg.algorithm()?.name().to_string(),
            seed: cfg.seed,
            rounds: cfg.rounds,
            evaluated_rounds: reports.len(),
            window: n,
            spread: "population standard deviation over the window".into(),
            final_global_train_loss: last.global_train_loss,
            final_mean_test_accuracy: last.mean_test_accuracy,
            global_train_loss: window_stats(&loss).expect("non-empty").into(),
            mean_test_accuracy: window_stats(&acc).expect("non-empty").into(),
            forward_passes_total: reports.iter().map(RoundReport::forward_passes_total).sum(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    pub rounds_csv: PathBuf,
    pub summary_json: PathBuf,
    pub manifest_json: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub version: String,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub outputs: Outputs,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}
