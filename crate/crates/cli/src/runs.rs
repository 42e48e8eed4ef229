//! Run-directory layout and result files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use mixforge::stats::mean_std;
use mixforge::training::{RunMetrics, Strategy};
use mixforge::Error;
use serde::Serialize;

use crate::config::ExperimentConfig;

pub const OUTPUT_ROOT_ENV: &str = "MIXFORGE_OUTPUT_ROOT";
pub const RESULTS_SCHEMA: &str = "mixforge.results.v1";
pub const TIMING_SCHEMA: &str = "mixforge.timing.v1";

/// Columns of the component-ablation table, in order.
pub const ABLATION_COLUMNS: [Strategy; 6] = [
    Strategy::Simple,
    Strategy::Mixup,
    Strategy::SoftmaxCam,
    Strategy::StnOnly,
    Strategy::MpnOnly,
    Strategy::TransformMix,
];

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Directory tree of one experiment:
///
/// ```text
/// <root>/<experiment>/teacher/seed-<s>/teacher.{safetensors,json}
///                    /mixer/seed-<s>/mixer.{safetensors,json}
///                    /task/<strategy>/seed-<s>/task.{safetensors,json}
///                    /task/results.csv, /task/ablation.csv
///                    /transfer/<strategy>/seed-<s>/..., /transfer/results.csv
///                    /visualize/grid.png, /bench/timing.json
/// ```
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(&cfg.name));
        Self {
            root: output_root().join(dir),
        }
    }

    pub fn teacher_dir(&self, seed: u64) -> PathBuf {
        self.root.join("teacher").join(format!("seed-{seed}"))
    }

    pub fn mixer_dir(&self, seed: u64) -> PathBuf {
        self.root.join("mixer").join(format!("seed-{seed}"))
    }

    pub fn task_dir(&self, stage: &str, strategy: Strategy, seed: u64) -> PathBuf {
        self.root.join(stage).join(strategy.id()).join(format!("seed-{seed}"))
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    pub fn teacher_stem(&self, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
        cfg.artifacts
            .teacher
            .clone()
            .unwrap_or_else(|| self.teacher_dir(seed).join("teacher"))
    }

    pub fn mixer_stem(&self, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
        cfg.artifacts
            .mixer
            .clone()
            .unwrap_or_else(|| self.mixer_dir(seed).join("mixer"))
    }
}

/// Fails with a dependency error unless the checkpoint sidecar exists.
pub fn require_checkpoint(stem: &Path, what: &str, producer: &str) -> mixforge::Result<()> {
    let (_, json) = mixforge::models::checkpoint_paths(stem);
    if json.is_file() {
        Ok(())
    } else {
        Err(Error::Dependency(format!(
            "no {what} checkpoint at {}; run `mixforge {producer}` first",
            json.display()
        )))
    }
}

pub fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Config, metrics, summary and timing for one finished run.
pub fn write_run_files(
    dir: &Path,
    cfg: &ExperimentConfig,
    metrics: &RunMetrics,
    mut summary: serde_json::Value,
    seconds: f64,
) -> anyhow::Result<()> {
    create_dir(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    metrics.write_csv(&dir.join("metrics.csv"))?;
    if let (Some(obj), serde_json::Value::Object(m)) = (summary.as_object_mut(), metrics.summary()) {
        for (k, v) in m {
            obj.entry(k).or_insert(v);
        }
    }
    write_json(&dir.join("summary.json"), &summary)?;
    write_json(
        &dir.join("timing.json"),
        &serde_json::json!({
            "schema": TIMING_SCHEMA,
            "total_seconds": seconds,
            "epoch_seconds": metrics.epochs.iter().map(|e| e.seconds).collect::<Vec<_>>(),
        }),
    )
}

/// Final accuracy of one (strategy, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub strategy: Strategy,
    pub seed: u64,
    pub top1_pct: f64,
    pub top5_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ResultRow {
    pub schema: String,
    pub dataset: String,
    pub strategy: String,
    pub label: String,
    pub seeds: usize,
    pub top1_mean: f64,
    pub top1_std: f64,
    pub top5_mean: Option<f64>,
    pub top5_std: Option<f64>,
}

impl ResultRow {
    pub fn aggregate(dataset: &str, strategy: Strategy, runs: &[&RunResult]) -> Self {
        let top1: Vec<f64> = runs.iter().map(|r| r.top1_pct).collect();
        let top5: Option<Vec<f64>> = runs.iter().map(|r| r.top5_pct).collect();
        let (top1_mean, top1_std) = mean_std(&top1);
        let top5_stats = top5.filter(|v| !v.is_empty()).map(|v| mean_std(&v));
        Self {
            schema: RESULTS_SCHEMA.into(),
            dataset: dataset.into(),
            strategy: strategy.id().into(),
            label: strategy.label().into(),
            seeds: runs.len(),
            top1_mean,
            top1_std,
            top5_mean: top5_stats.map(|s| s.0),
            top5_std: top5_stats.map(|s| s.1),
        }
    }

    /// `mean±std` cell with two decimals.
    pub fn cell(&self) -> String {
        format!("{:.2}±{:.2}", self.top1_mean, self.top1_std)
    }
}

fn read_rows(path: &Path) -> anyhow::Result<Vec<ResultRow>> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<Result<Vec<ResultRow>, _>>()?;
    if rows.iter().any(|row| row.schema != RESULTS_SCHEMA) {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            message: format!("expected schema {RESULTS_SCHEMA}"),
        }
        .into());
    }
    Ok(rows)
}

/// Merges `runs` into `<dir>/results.csv` (one row per dataset and strategy)
/// and rewrites `<dir>/ablation.csv`. Returns the merged rows.
pub fn update_results(dir: &Path, dataset: &str, runs: &[RunResult]) -> anyhow::Result<Vec<ResultRow>> {
    create_dir(dir)?;
    let path = dir.join("results.csv");
    let mut rows = read_rows(&path)?;
    let mut by_strategy: BTreeMap<&str, (Strategy, Vec<&RunResult>)> = BTreeMap::new();
    for r in runs {
        by_strategy
            .entry(r.strategy.id())
            .or_insert((r.strategy, Vec::new()))
            .1
            .push(r);
    }
    for (id, (strategy, group)) in by_strategy {
        let row = ResultRow::aggregate(dataset, strategy, &group);
        match rows.iter_mut().find(|r| r.dataset == dataset && r.strategy == id) {
            Some(existing) => *existing = row,
            None => rows.push(row),
        }
    }
    let mut w = csv::Writer::from_path(&path)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    write_ablation(&dir.join("ablation.csv"), &rows)?;
    Ok(rows)
}

/// One row per dataset, one `mean±std` column per ablation strategy.
fn write_ablation(path: &Path, rows: &[ResultRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["dataset".to_string()];
    header.extend(ABLATION_COLUMNS.iter().map(|s| s.label().to_string()));
    w.write_record(&header)?;
    let mut datasets: Vec<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
    datasets.dedup();
    for d in datasets {
        let mut record = vec![d.to_string()];
        for s in ABLATION_COLUMNS {
            let cell = rows.iter().find(|r| r.dataset == d && r.strategy == s.id());
            record.push(cell.map(ResultRow::cell).unwrap_or_default());
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}
