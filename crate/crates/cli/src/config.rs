//! TOML experiment files.

use std::path::{Path, PathBuf};

use anyhow::Context;
use candle_core::DType;
use mixforge::data::DatasetSpec;
use mixforge::mixer::{MaskNetConfig, MixerConfig, TransformNetConfig, WarpPadding, DEFAULT_NOISE_GRID};
use mixforge::models::Family;
use mixforge::saliency::CamTarget;
use mixforge::training::{SearchConfig, Strategy, TaskConfig};
use mixforge::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_k() -> usize {
    2
}

fn default_noise_grid() -> (usize, usize) {
    DEFAULT_NOISE_GRID
}

fn default_tau() -> f64 {
    1.0
}

fn default_min_tau() -> f64 {
    1e-3
}

/// Mixer architecture; the native resolution is taken from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixerSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub cam_target: CamTarget,
    #[serde(default)]
    pub transform: TransformNetConfig,
    #[serde(default)]
    pub mask: MaskNetConfig,
    #[serde(default = "default_noise_grid")]
    pub noise_grid: (usize, usize),
    #[serde(default = "default_tau")]
    pub init_tau: f64,
    #[serde(default = "default_min_tau")]
    pub min_tau: f64,
    #[serde(default)]
    pub padding: WarpPadding,
}

impl Default for MixerSection {
    fn default() -> Self {
        Self {
            k: 2,
            cam_target: CamTarget::Label,
            transform: TransformNetConfig::default(),
            mask: MaskNetConfig::default(),
            noise_grid: DEFAULT_NOISE_GRID,
            init_tau: 1.0,
            min_tau: 1e-3,
            padding: WarpPadding::Zeros,
        }
    }
}

impl MixerSection {
    pub fn mixer_config(&self, height: usize, width: usize) -> MixerConfig {
        MixerConfig {
            k: self.k,
            height,
            width,
            transform: self.transform,
            mask: self.mask,
            noise_grid: self.noise_grid,
            init_tau: self.init_tau,
            min_tau: self.min_tau,
            padding: self.padding,
        }
    }
}

/// Explicit checkpoint locations; unset entries use the run layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifacts {
    pub teacher: Option<PathBuf>,
    pub mixer: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    /// Mixer checkpoint trained on the source dataset.
    pub mixer: PathBuf,
}

fn default_vis_n() -> usize {
    8
}

fn default_pair() -> (usize, usize) {
    (0, 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualizeSection {
    /// Number of mixed samples (grid columns).
    #[serde(default = "default_vis_n")]
    pub n: usize,
    #[serde(default = "default_true")]
    pub lambda_sweep: bool,
    /// Dataset indices of the pair used for the sweep.
    #[serde(default = "default_pair")]
    pub pair: (usize, usize),
}

impl Default for VisualizeSection {
    fn default() -> Self {
        Self {
            n: 8,
            lambda_sweep: true,
            pair: (0, 1),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub batch_size: usize,
    pub trials: usize,
    /// Untimed runs before the trials.
    pub warmup: usize,
    pub iterative_steps: usize,
    pub iterative_lr: f64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub teacher: Family,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            batch_size: 128,
            trials: 10,
            warmup: 1,
            iterative_steps: 100,
            iterative_lr: 0.1,
            channels: 3,
            height: 32,
            width: 32,
            classes: 10,
            teacher: Family::ToyCnn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Strategy for `train-task` and `transfer`.
    #[serde(default)]
    pub strategy: Strategy,
    /// Sweep for `train-task`; overrides `strategy` when non-empty.
    #[serde(default)]
    pub strategies: Vec<Strategy>,
    /// Run directory below the output root; defaults to `name`.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub precision: Precision,
    pub dataset: DatasetSpec,
    pub task: TaskConfig,
    /// Teacher training; defaults to `task` without mixing.
    #[serde(default)]
    pub teacher: Option<TaskConfig>,
    #[serde(default)]
    pub mixer: MixerSection,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub artifacts: Artifacts,
    #[serde(default)]
    pub transfer: Option<TransferSection>,
    #[serde(default)]
    pub visualize: VisualizeSection,
    #[serde(default)]
    pub bench: BenchSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> mixforge::Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!(
                "experiment name `{}` is not a plain name",
                self.name
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.dataset.validate()?;
        self.task.validate()?;
        if let Some(t) = &self.teacher {
            t.validate()?;
        }
        self.search.validate()?;
        let (h, w) = (self.dataset.height, self.dataset.width);
        self.mixer.mixer_config(h, w).validate()?;
        if self.bench.trials == 0 || self.bench.batch_size < self.mixer.k || self.bench.iterative_steps == 0 {
            return Err(Error::Config(
                "bench needs trials, iterative steps and a batch of at least k".into(),
            ));
        }
        if self.visualize.n == 0 {
            return Err(Error::Config("visualize.n must be positive".into()));
        }
        Ok(())
    }

    /// Teacher training settings: the `[teacher]` section or the task settings, never mixing.
    pub fn teacher_config(&self, seed: u64) -> TaskConfig {
        let mut cfg = self.teacher.clone().unwrap_or_else(|| self.task.clone());
        cfg.strategy = Strategy::Simple;
        cfg.seed = seed;
        cfg
    }

    pub fn task_config(&self, strategy: Strategy, seed: u64) -> TaskConfig {
        let mut cfg = self.task.clone();
        cfg.strategy = strategy;
        cfg.seed = seed;
        cfg
    }

    pub fn sweep(&self) -> Vec<Strategy> {
        if self.strategies.is_empty() {
            vec![self.strategy]
        } else {
            self.strategies.clone()
        }
    }

    /// Applies command-line overrides.
    pub fn apply_overrides(&mut self, seed: Option<u64>, strategies: &[Strategy]) -> mixforge::Result<()> {
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        match strategies {
            [] => {}
            [one] => {
                self.strategy = *one;
                self.strategies.clear();
            }
            many => self.strategies = many.to_vec(),
        }
        self.validate()
    }
}
