//! Wall-clock cost of producing one mixed batch.

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use mixforge::baselines::{iterative_mask_optimizer, IterativeConfig};
use mixforge::data::ImageBatch;
use mixforge::mixer::{mix_batch, MixSettings, MixerConfig, MixerParams};
use mixforge::models::{build_model, ArchSpec};
use mixforge::saliency::TeacherHandle;
use mixforge::stats::mean_std;
use mixforge::SeedStreams;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{BenchSection, ExperimentConfig};
use crate::runs::{create_dir, write_json, Layout, TIMING_SCHEMA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub samples: Vec<f64>,
}

impl MethodTiming {
    fn from_samples(samples: Vec<f64>) -> Self {
        let (mean_seconds, std_seconds) = mean_std(&samples);
        Self {
            mean_seconds,
            std_seconds,
            samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub schema: String,
    pub batch_size: usize,
    pub trials: usize,
    pub warmup: usize,
    pub input: [usize; 3],
    pub k: usize,
    pub teacher: String,
    pub iterative_steps: usize,
    /// Single forward pass of the learned mixer.
    pub transformmix: MethodTiming,
    /// Per-batch gradient-based mask optimization.
    pub iterative: MethodTiming,
    /// `iterative.mean / transformmix.mean`
    pub speedup: f64,
}

fn time_trials(
    warmup: usize,
    trials: usize,
    mut f: impl FnMut() -> mixforge::Result<()>,
) -> mixforge::Result<Vec<f64>> {
    for _ in 0..warmup {
        f()?;
    }
    (0..trials)
        .map(|_| {
            let start = Instant::now();
            f()?;
            Ok(start.elapsed().as_secs_f64())
        })
        .collect()
}

/// Times both mixers on one random batch with untrained weights; the cost of
/// either does not depend on the weight values.
pub fn run_bench(section: &BenchSection, mixer: MixerConfig, seed: u64) -> mixforge::Result<TimingReport> {
    let streams = SeedStreams::new(seed);
    let (c, h, w) = (section.channels, section.height, section.width);
    let spec = ArchSpec::new(section.teacher, c, h, w, section.classes);
    let model = build_model(spec, streams.stream("bench/teacher"), DType::F32, &Device::Cpu)?;
    let teacher = TeacherHandle::freeze(&model, section.teacher.to_string())?;
    let params = MixerParams::init(mixer, streams.stream("bench/mixer"), DType::F32, &Device::Cpu)?.freeze()?;
    let n = section.batch_size;
    let mut rng = streams.stream("bench/images");
    let pixels: Vec<f32> = (0..n * c * h * w)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32
        })
        .collect();
    let images = Tensor::from_vec(pixels, (n, c, h, w), &Device::Cpu)?;
    let batch = ImageBatch::new(
        images,
        (0..n).map(|i| (i % section.classes) as u32).collect(),
        section.classes,
    )?;

    let settings = MixSettings::default();
    let mut mix_rng = streams.stream("bench/mix");
    let learned = time_trials(section.warmup, section.trials, || {
        mix_batch(&batch, &teacher, &params, &settings, &mut mix_rng).map(drop)
    })?;
    let iterative_cfg = IterativeConfig {
        steps: section.iterative_steps,
        lr: section.iterative_lr,
        alpha: settings.alpha,
    };
    let mut it_rng = streams.stream("bench/iterative");
    // one step touches every code path of the loop
    let warm_cfg = IterativeConfig {
        steps: 1,
        ..iterative_cfg
    };
    for _ in 0..section.warmup {
        iterative_mask_optimizer(&batch, &teacher, &warm_cfg, &mut it_rng)?;
    }
    let iterative = time_trials(0, section.trials, || {
        iterative_mask_optimizer(&batch, &teacher, &iterative_cfg, &mut it_rng).map(drop)
    })?;
    let transformmix = MethodTiming::from_samples(learned);
    let iterative = MethodTiming::from_samples(iterative);
    Ok(TimingReport {
        schema: TIMING_SCHEMA.into(),
        batch_size: n,
        trials: section.trials,
        warmup: section.warmup,
        input: [c, h, w],
        k: params.k(),
        teacher: section.teacher.to_string(),
        iterative_steps: section.iterative_steps,
        speedup: iterative.mean_seconds / transformmix.mean_seconds,
        transformmix,
        iterative,
    })
}

pub fn bench(cfg: &ExperimentConfig) -> anyhow::Result<Value> {
    let layout = Layout::new(cfg);
    let dir = layout.stage_dir("bench");
    create_dir(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let mixer = cfg.mixer.mixer_config(cfg.bench.height, cfg.bench.width);
    let report = run_bench(&cfg.bench, mixer, cfg.seeds[0])?;
    log::info!(
        "mixing {} images: learned {:.4}s, iterative {:.4}s ({:.1}x)",
        report.batch_size,
        report.transformmix.mean_seconds,
        report.iterative.mean_seconds,
        report.speedup
    );
    write_json(&dir.join("timing.json"), &report)?;
    Ok(serde_json::to_value(&report)?)
}
