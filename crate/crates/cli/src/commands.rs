//! Training subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mixforge::data::{load_dataset, Dataset, Split};
use mixforge::mixer::{load_mixer, save_mixer, MixStrategy, MixerParams, MixerSidecar};
use mixforge::models::{save_checkpoint, CheckpointMeta, Model};
use mixforge::saliency::TeacherHandle;
use mixforge::training::{augmenter_for, train_mixer, train_task, NoMix, Strategy, TaskConfig, TaskRun};
use mixforge::Error;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::runs::{require_checkpoint, update_results, write_run_files, Layout, RunResult};

pub fn load_splits(cfg: &ExperimentConfig) -> mixforge::Result<(Dataset, Dataset)> {
    Ok((
        load_dataset(&cfg.dataset.with_split(Split::Train))?,
        load_dataset(&cfg.dataset.with_split(Split::Test))?,
    ))
}

fn save_model(
    model: &Model,
    cfg: &ExperimentConfig,
    task: &TaskConfig,
    run: &TaskRun,
    stem: &Path,
) -> anyhow::Result<CheckpointMeta> {
    let meta = CheckpointMeta {
        arch: *model.spec(),
        dataset: cfg.dataset.name.clone(),
        seed: task.seed,
        epoch: task.epochs,
        metrics_digest: run.metrics.digest(),
        weights_digest: String::new(),
        dtype: String::new(),
    };
    Ok(save_checkpoint(model, meta, stem)?)
}

fn final_accuracy(run: &TaskRun) -> (Option<f64>, Option<f64>) {
    run.metrics.last().map_or((None, None), |e| (e.top1_pct, e.top5_pct))
}

pub fn load_teacher(layout: &Layout, cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<TeacherHandle> {
    let stem = layout.teacher_stem(cfg, seed);
    require_checkpoint(&stem, "teacher", "train-teacher")?;
    Ok(TeacherHandle::load(&stem)?)
}

pub fn load_trained_mixer(
    layout: &Layout,
    cfg: &ExperimentConfig,
    seed: u64,
) -> anyhow::Result<(MixerParams, MixerSidecar)> {
    let stem = layout.mixer_stem(cfg, seed);
    require_checkpoint(&stem, "mixer", "train-mixer")?;
    Ok(load_mixer(&stem, true)?)
}

/// Trains the teacher with plain supervised batches, once per seed.
pub fn train_teacher(cfg: &ExperimentConfig) -> anyhow::Result<Value> {
    let layout = Layout::new(cfg);
    let (train, test) = load_splits(cfg)?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let task = cfg.teacher_config(seed);
        let dir = layout.teacher_dir(seed);
        crate::runs::create_dir(&dir)?;
        log::info!("teacher seed {seed}: {} for {} epochs", task.arch, task.epochs);
        let start = Instant::now();
        let run = train_task(&train, &test, &NoMix, &task, cfg.precision.dtype(), Some(&dir))?;
        let meta = save_model(&run.model, cfg, &task, &run, &dir.join("teacher"))?;
        let (top1, top5) = final_accuracy(&run);
        let summary = json!({
            "command": "train-teacher",
            "seed": seed,
            "arch": task.arch.to_string(),
            "checkpoint": dir.join("teacher.safetensors"),
            "weights_digest": meta.weights_digest,
        });
        write_run_files(&dir, cfg, &run.metrics, summary, start.elapsed().as_secs_f64())?;
        runs.push(json!({ "seed": seed, "dir": dir, "top1_pct": top1, "top5_pct": top5 }));
    }
    Ok(json!({ "command": "train-teacher", "runs": runs }))
}

/// Search stage against the teacher of the same seed.
pub fn train_mixer_cmd(cfg: &ExperimentConfig) -> anyhow::Result<Value> {
    let layout = Layout::new(cfg);
    let train = load_dataset(&cfg.dataset.with_split(Split::Train))?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let teacher = load_teacher(&layout, cfg, seed)?;
        let dir = layout.mixer_dir(seed);
        crate::runs::create_dir(&dir)?;
        let mixer_cfg = cfg.mixer.mixer_config(train.height, train.width);
        let mut search = cfg.search.clone();
        search.cam_target = cfg.mixer.cam_target;
        let start = Instant::now();
        let run = train_mixer(&train, &teacher, mixer_cfg, &search, seed, Some(&dir))?;
        let sidecar = MixerSidecar::describe(&run.params, search.alpha, MixStrategy::Full, &train.name, teacher.id())?;
        let sidecar = save_mixer(&run.params, sidecar, &dir.join("mixer"))?;
        let summary = json!({
            "command": "train-mixer",
            "seed": seed,
            "k": sidecar.k,
            "tau": sidecar.tau,
            "channels": sidecar.channels,
            "teacher": teacher.id(),
            "checkpoint": dir.join("mixer.safetensors"),
        });
        write_run_files(&dir, cfg, &run.metrics, summary, start.elapsed().as_secs_f64())?;
        runs.push(json!({ "seed": seed, "dir": dir, "tau": sidecar.tau }));
    }
    Ok(json!({ "command": "train-mixer", "runs": runs }))
}

/// Where learned strategies get their mixer from.
enum MixerSource {
    /// The `train-mixer` output of the same seed (or `artifacts.mixer`).
    Trained,
    /// One fixed checkpoint, possibly from another dataset.
    Fixed(PathBuf),
}

fn run_stage(
    cfg: &ExperimentConfig,
    stage: &str,
    strategies: &[Strategy],
    source: &MixerSource,
) -> anyhow::Result<Value> {
    let layout = Layout::new(cfg);
    let (train, test) = load_splits(cfg)?;
    let mut results = Vec::new();
    let mut runs = Vec::new();
    for &strategy in strategies {
        for &seed in &cfg.seeds {
            let learned = strategy.mix_strategy().is_some();
            let mixer = if learned {
                let teacher = load_teacher(&layout, cfg, seed)?;
                let (params, sidecar) = match source {
                    MixerSource::Trained => load_trained_mixer(&layout, cfg, seed)?,
                    MixerSource::Fixed(stem) => {
                        require_checkpoint(stem, "source mixer", "train-mixer")?;
                        load_mixer(stem, true)?
                    }
                };
                if sidecar.k != cfg.mixer.k {
                    return Err(Error::Config(format!(
                        "mixer checkpoint mixes k={} inputs, the experiment asks for k={}",
                        sidecar.k, cfg.mixer.k
                    ))
                    .into());
                }
                Some((teacher, params))
            } else {
                None
            };
            let augmenter = augmenter_for(
                strategy,
                cfg.task.alpha,
                cfg.mixer.cam_target,
                mixer.as_ref().map(|(t, p)| (t.clone(), p)),
            )?;
            let task = cfg.task_config(strategy, seed);
            let dir = layout.task_dir(stage, strategy, seed);
            crate::runs::create_dir(&dir)?;
            log::info!("{stage} {strategy} seed {seed}");
            let start = Instant::now();
            let run = train_task(
                &train,
                &test,
                augmenter.as_ref(),
                &task,
                cfg.precision.dtype(),
                Some(&dir),
            )?;
            save_model(&run.model, cfg, &task, &run, &dir.join("task"))?;
            let (top1, top5) = final_accuracy(&run);
            let summary = json!({
                "command": stage,
                "strategy": strategy.id(),
                "seed": seed,
                "arch": task.arch.to_string(),
                "mixer": mixer.as_ref().map(|(t, p)| json!({
                    "teacher": t.id(),
                    "k": p.k(),
                    "native": [p.config().height, p.config().width],
                })),
            });
            write_run_files(&dir, cfg, &run.metrics, summary, start.elapsed().as_secs_f64())?;
            if let Some(top1_pct) = top1 {
                results.push(RunResult {
                    strategy,
                    seed,
                    top1_pct,
                    top5_pct: top5,
                });
            }
            runs.push(json!({ "strategy": strategy.id(), "seed": seed, "dir": dir, "top1_pct": top1 }));
        }
    }
    let rows = update_results(&layout.stage_dir(stage), &cfg.dataset.name, &results)?;
    Ok(json!({
        "command": stage,
        "runs": runs,
        "results": rows.iter().map(|r| json!({
            "strategy": r.strategy,
            "top1_mean": r.top1_mean,
            "top1_std": r.top1_std,
            "seeds": r.seeds,
        })).collect::<Vec<_>>(),
    }))
}

pub fn train_task_cmd(cfg: &ExperimentConfig) -> anyhow::Result<Value> {
    run_stage(cfg, "task", &cfg.sweep(), &MixerSource::Trained)
}

/// Task training on this experiment's dataset with a mixer trained elsewhere.
pub fn transfer(cfg: &ExperimentConfig) -> anyhow::Result<Value> {
    let section = cfg
        .transfer
        .as_ref()
        .ok_or_else(|| Error::Config("transfer needs a [transfer] section naming the source mixer".into()))?;
    let strategies = cfg.sweep();
    if let Some(s) = strategies.iter().find(|s| s.mix_strategy().is_none()) {
        return Err(Error::Config(format!("transfer applies a learned mixer; `{s}` does not use one")).into());
    }
    run_stage(cfg, "transfer", &strategies, &MixerSource::Fixed(section.mixer.clone()))
}
