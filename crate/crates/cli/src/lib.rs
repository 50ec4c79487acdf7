//! Experiment runner: `run`, `compare` and `verify`.

pub mod config;
pub mod output;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use pflego_core::model::{Backbone, PersonalizedModel};
use pflego_core::orchestrator::{
    prepare, run_experiment_with, verify_oracle_equivalence, verify_unbiasedness, window_stats,
    RoundReport,
};

use config::RunConfig;
use output::{read_rounds, write_json, Outputs, RoundsWriter, Row, RunManifest, Stat, Summary};

/// Bad invocation or configuration; the binary exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Rounds of the oracle trajectory compared by `verify`.
pub const ORACLE_ROUNDS: u64 = 10;
/// Largest coordinate gap accepted between PFLEGO and the oracle.
pub const ORACLE_TOLERANCE: f64 = 1e-12;

/// `runs/<algorithm>-seed<seed>`, with a numeric suffix if taken.
pub fn default_run_dir(cfg: &RunConfig) -> PathBuf {
    let base = format!("{}-seed{}", cfg.algorithm, cfg.seed);
    let mut dir = PathBuf::from("runs").join(&base);
    let mut n = 2;
    while dir.exists() {
        dir = PathBuf::from("runs").join(format!("{base}-{n}"));
        n += 1;
    }
    dir
}

/// Runs one experiment into a fresh directory and returns the final summary.
pub fn run(cfg: &RunConfig, out: &Path, wall_time: bool) -> anyhow::Result<Summary> {
    let experiment = cfg.experiment().map_err(|e| UsageError(e.to_string()))?;
    if out.exists() {
        return Err(UsageError(format!("run directory {} already exists", out.display())).into());
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let outputs = Outputs {
        rounds_csv: out.join(output::ROUNDS_FILE),
        summary_json: out.join(output::SUMMARY_FILE),
        manifest_json: out.join(output::MANIFEST_FILE),
    };
    let manifest = RunManifest {
        config: cfg.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        started_at: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        outputs: outputs.clone(),
    };
    write_json(&outputs.manifest_json, &manifest)?;

    let mut writer = RoundsWriter::create(&outputs.rounds_csv, wall_time)?;
    let mut reports: Vec<RoundReport> = Vec::new();
    let mut write_error = None;
    run_experiment_with(&experiment, |r| {
        if write_error.is_none() {
            write_error = writer.write(r).err();
        }
        reports.push(r.clone());
    })?;
    if let Some(e) = write_error {
        return Err(e);
    }
    let summary = Summary::from_reports(cfg, &reports)?;
    write_json(&outputs.summary_json, &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricComparison {
    pub name: &'static str,
    pub a: Stat,
    pub b: Stat,
    /// `a - b` of the window means.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rounds_a: usize,
    pub rounds_b: usize,
    /// Rounds evaluated in both runs.
    pub common: usize,
    pub window: usize,
    pub metrics: Vec<MetricComparison>,
}

/// Final-window statistics of two runs over the rounds both evaluated.
pub fn compare_runs(a: &Path, b: &Path) -> anyhow::Result<Comparison> {
    let rows_a = read_rounds(a)?;
    let rows_b = read_rounds(b)?;
    let by_round: BTreeMap<u64, &Row> = rows_b.iter().map(|r| (r.round, r)).collect();
    let pairs: Vec<(&Row, &Row)> = rows_a
        .iter()
        .filter_map(|r| by_round.get(&r.round).map(|&o| (r, o)))
        .collect();
    let window = output::FINAL_WINDOW.min(pairs.len());
    let tail = &pairs[pairs.len() - window..];
    let mut metrics = Vec::new();
    if window > 0 {
        let metric = |name, f: fn(&Row) -> f64| {
            let xs: Vec<f64> = tail.iter().map(|(x, _)| f(x)).collect();
            let ys: Vec<f64> = tail.iter().map(|(_, y)| f(y)).collect();
            let a: Stat = window_stats(&xs).expect("non-empty").into();
            let b: Stat = window_stats(&ys).expect("non-empty").into();
            MetricComparison {
                name,
                a,
                b,
                delta: a.mean - b.mean,
            }
        };
        metrics.push(metric("global_train_loss", |r| r.global_train_loss));
        metrics.push(metric("mean_test_accuracy", |r| r.mean_test_accuracy));
    }
    Ok(Comparison {
        rounds_a: rows_a.len(),
        rounds_b: rows_b.len(),
        common: pairs.len(),
        window,
        metrics,
    })
}

pub fn print_comparison(c: &Comparison, mut out: impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "common evaluated rounds: {} (a: {}, b: {}); final window: {}",
        c.common, c.rounds_a, c.rounds_b, c.window
    )?;
    if c.metrics.is_empty() {
        return writeln!(out, "no rounds in common, nothing to compare");
    }
    writeln!(
        out,
        "{:<20} {:>14} {:>12} {:>14} {:>12} {:>14}",
        "metric", "a mean", "a stddev", "b mean", "b stddev", "delta (a-b)"
    )?;
    for m in &c.metrics {
        writeln!(
            out,
            "{:<20} {:>14.6} {:>12.6} {:>14.6} {:>12.6} {:>+14.6}",
            m.name, m.a.mean, m.a.stddev, m.b.mean, m.b.stddev, m.delta
        )?;
    }
    Ok(())
}

/// Outcome of one `verify` check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// The unbiasedness and oracle checks on the federation described by `cfg`.
pub fn verify(cfg: &RunConfig) -> anyhow::Result<Vec<Check>> {
    let experiment = cfg.experiment().map_err(|e| UsageError(e.to_string()))?;
    let prepared = prepare(&experiment)?;
    let data = &prepared.datasets;
    let dim = data[0].train.inputs.cols();
    let mut model =
        PersonalizedModel::new(Backbone::mlp(dim, &experiment.hidden)?, experiment.seed)?;
    model.ensure_heads(data);

    let report = verify_unbiasedness(&model, data, &experiment.participation, experiment.seed)?;
    let how = if report.exhaustive {
        format!("exhaustive over {} subsets", report.subsets)
    } else {
        format!(
            "{} sampled rounds, standard error {:.3e}",
            report.subsets,
            report.standard_error.unwrap_or(0.0)
        )
    };
    let unbiased = Check {
        name: "unbiasedness",
        passed: report.passes(),
        detail: format!(
            "{how}; max deviation {:.3e} (backbone {:.3e}, heads {:.3e})",
            report.max_abs_deviation, report.theta_deviation, report.head_deviation
        ),
    };

    let gap = verify_oracle_equivalence(&model, data, cfg.server.rate, ORACLE_ROUNDS)?;
    let oracle = Check {
        name: "oracle equivalence",
        passed: gap < ORACLE_TOLERANCE,
        detail: format!(
            "{ORACLE_ROUNDS} rounds at rate {}; max deviation {gap:.3e}",
            cfg.server.rate
        ),
    };
    Ok(vec![unbiased, oracle])
}
