use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::loss::{scalar, soft_cross_entropy};
use super::metrics::{EpochMetrics, RunMetrics};
use super::search::DivergenceGuard;
use crate::baselines::{cutmix, mixup};
use crate::data::{Dataset, ImageBatch, StandardAugment};
use crate::error::{Error, Result};
use crate::mixer::{mix_batch, MixSettings, MixStrategy, MixedBatch, MixerParams};
use crate::models::{build_model, ArchSpec, Family, Model};
use crate::nn::{Sgd, SgdConfig};
use crate::rng::{Rng, SeedStreams};
use crate::saliency::{CamTarget, TeacherHandle};

/// How training batches are mixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// No mixing.
    Simple,
    Mixup,
    #[serde(rename = "cutmix")]
    CutMix,
    /// Learned transforms and learned masks.
    #[default]
    #[serde(rename = "transformmix")]
    TransformMix,
    StnOnly,
    MpnOnly,
    SoftmaxCam,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Simple,
        Strategy::Mixup,
        Strategy::CutMix,
        Strategy::TransformMix,
        Strategy::StnOnly,
        Strategy::MpnOnly,
        Strategy::SoftmaxCam,
    ];

    /// The configurations compared in the mixing ablation.
    pub const ABLATION: [Strategy; 4] = [
        Strategy::SoftmaxCam,
        Strategy::StnOnly,
        Strategy::MpnOnly,
        Strategy::TransformMix,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Strategy::Simple => "simple",
            Strategy::Mixup => "mixup",
            Strategy::CutMix => "cutmix",
            Strategy::TransformMix => "transformmix",
            Strategy::StnOnly => "stn-only",
            Strategy::MpnOnly => "mpn-only",
            Strategy::SoftmaxCam => "softmax-cam",
        }
    }

    /// Column label used in result tables.
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::Simple => "Simple",
            Strategy::Mixup => "Mixup",
            Strategy::CutMix => "CutMix",
            Strategy::TransformMix => "TransformMix",
            Strategy::StnOnly => "w/ STN only",
            Strategy::MpnOnly => "w/ MPN only",
            Strategy::SoftmaxCam => "softmax+CAM",
        }
    }

    /// Mixer mode, for strategies driven by a mixing module.
    pub fn mix_strategy(&self) -> Option<MixStrategy> {
        match self {
            Strategy::TransformMix => Some(MixStrategy::Full),
            Strategy::StnOnly => Some(MixStrategy::StnOnly),
            Strategy::MpnOnly => Some(MixStrategy::MpnOnly),
            Strategy::SoftmaxCam => Some(MixStrategy::SoftmaxCam),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// Produces the training batch seen by the task network.
pub trait BatchAugmenter {
    fn augment(&self, batch: &ImageBatch, rng: &mut Rng) -> Result<MixedBatch>;
}

/// Leaves images untouched; labels become one-hot rows.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoMix;

impl BatchAugmenter for NoMix {
    fn augment(&self, batch: &ImageBatch, _rng: &mut Rng) -> Result<MixedBatch> {
        Ok(MixedBatch {
            images: batch.images.clone(),
            labels: batch.one_hot()?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MixupAugmenter {
    pub alpha: f64,
}

impl BatchAugmenter for MixupAugmenter {
    fn augment(&self, batch: &ImageBatch, rng: &mut Rng) -> Result<MixedBatch> {
        mixup(batch, self.alpha, rng)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CutMixAugmenter {
    pub alpha: f64,
}

impl BatchAugmenter for CutMixAugmenter {
    fn augment(&self, batch: &ImageBatch, rng: &mut Rng) -> Result<MixedBatch> {
        cutmix(batch, self.alpha, rng)
    }
}

/// Mixing with a frozen mixing module and its teacher.
pub struct LearnedMixer {
    teacher: TeacherHandle,
    params: MixerParams,
    settings: MixSettings,
}

impl LearnedMixer {
    /// Takes a frozen snapshot of `params`.
    pub fn new(teacher: TeacherHandle, params: &MixerParams, settings: MixSettings) -> Result<Self> {
        Ok(Self {
            teacher,
            params: params.freeze()?,
            settings,
        })
    }

    pub fn params(&self) -> &MixerParams {
        &self.params
    }

    pub fn teacher(&self) -> &TeacherHandle {
        &self.teacher
    }
}

impl BatchAugmenter for LearnedMixer {
    fn augment(&self, batch: &ImageBatch, rng: &mut Rng) -> Result<MixedBatch> {
        let out = mix_batch(batch, &self.teacher, &self.params, &self.settings, rng)?;
        let dtype = batch.images.dtype();
        Ok(MixedBatch {
            images: out.batch.images.detach().to_dtype(dtype)?,
            labels: out.batch.labels.detach().to_dtype(dtype)?,
        })
    }
}

/// Augmenter for a strategy; learned strategies need a teacher and mixer.
pub fn augmenter_for(
    strategy: Strategy,
    alpha: f64,
    cam_target: CamTarget,
    mixer: Option<(TeacherHandle, &MixerParams)>,
) -> Result<Box<dyn BatchAugmenter>> {
    Ok(match strategy {
        Strategy::Simple => Box::new(NoMix),
        Strategy::Mixup => Box::new(MixupAugmenter { alpha }),
        Strategy::CutMix => Box::new(CutMixAugmenter { alpha }),
        learned => {
            let (teacher, params) = mixer.ok_or_else(|| {
                Error::Dependency(format!("strategy `{learned}` needs a teacher and a mixer checkpoint"))
            })?;
            let settings = MixSettings {
                strategy: learned.mix_strategy().unwrap_or_default(),
                alpha,
                cam_target,
            };
            Box::new(LearnedMixer::new(teacher, params, settings)?)
        }
    })
}

/// Step-decay learning rate: `initial * factor^(number of milestones passed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    /// 0-based epochs at which the rate is multiplied by `factor`.
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_factor")]
    pub factor: f64,
}

fn default_factor() -> f64 {
    0.1
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            milestones: Vec::new(),
            factor: 0.1,
        }
    }

    /// Rate used throughout 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.initial * self.factor.powi(passed as i32)
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        if !(self.initial > 0.0) || !(self.factor > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "decay epochs {:?} must be strictly increasing",
                self.milestones
            )));
        }
        if let Some(&last) = self.milestones.last() {
            if last >= epochs {
                return Err(Error::Config(format!(
                    "decay epoch {last} is not below the {epochs} training epochs"
                )));
            }
        }
        Ok(())
    }
}

fn default_true() -> bool {
    true
}

fn default_one() -> f64 {
    1.0
}

fn default_eval_batch() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub arch: Family,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default = "default_one")]
    pub alpha: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Random crop + horizontal flip before mixing.
    #[serde(default = "default_true")]
    pub standard_augment: bool,
    /// Probability that a batch is mixed at all.
    #[serde(default = "default_one")]
    pub mix_probability: f64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

impl TaskConfig {
    pub fn new(arch: Family, epochs: usize, lr: f64, batch_size: usize) -> Self {
        Self {
            arch,
            epochs,
            schedule: LrSchedule::constant(lr),
            batch_size,
            seed: 0,
            strategy: Strategy::TransformMix,
            alpha: 1.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            standard_augment: true,
            mix_probability: 1.0,
            eval_batch_size: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate(self.epochs)?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mix_probability) {
            return Err(Error::Config(format!(
                "mix probability {} outside [0, 1]",
                self.mix_probability
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("task optimizer settings out of range".into()));
        }
        Ok(())
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.schedule.initial,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// One update of the task network on an already mixed batch.
pub fn task_step(
    model: &Model,
    opt: &mut Sgd,
    mixed: &MixedBatch,
    guard: &mut DivergenceGuard,
    step: usize,
) -> Result<f64> {
    let logits = model.forward_t(&mixed.images, true)?;
    let loss = soft_cross_entropy(&logits, &mixed.labels)?;
    let value = scalar(&loss)?;
    if guard.check(step, value, &mixed.images)? {
        opt.step(&loss.backward()?)?;
    }
    Ok(value)
}

pub struct TaskRun {
    pub model: Model,
    pub metrics: RunMetrics,
}

/// Trains a fresh task network on batches produced by `augmenter`.
///
/// Random streams are split by purpose (init, shuffling, crop/flip,
/// mixing), so two augmenters that ignore their rng see identical batches.
pub fn train_task(
    train: &Dataset,
    test: &Dataset,
    augmenter: &dyn BatchAugmenter,
    cfg: &TaskConfig,
    dtype: candle_core::DType,
    dump_dir: Option<&Path>,
) -> Result<TaskRun> {
    cfg.validate()?;
    if train.dims() != test.dims() || train.num_classes != test.num_classes {
        return Err(Error::Config(
            "train and test splits disagree in shape or class count".into(),
        ));
    }
    let (c, h, w) = train.dims();
    let spec = ArchSpec::new(cfg.arch, c, h, w, train.num_classes);
    let device = candle_core::Device::Cpu;
    let streams = SeedStreams::new(cfg.seed);
    let model = build_model(spec, streams.stream("task/init"), dtype, &device)?;
    let vars = model.store().trainable().into_iter().map(|(_, v)| v.clone()).collect();
    let mut opt = Sgd::new(vars, cfg.sgd());
    let mut shuffle = streams.stream("task/shuffle");
    let mut aug_rng = streams.stream("task/augment");
    let mut mix_rng = streams.stream("task/mix");
    let mut gate = streams.stream("task/mix-gate");
    let augment = StandardAugment::default();
    let top5 = train.num_classes >= 5;
    let mut guard = DivergenceGuard::new(dump_dir);
    let mut metrics = RunMetrics::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.schedule.lr_at(epoch);
        opt.set_lr(lr);
        let (mut total, mut count) = (0.0, 0usize);
        for idx in train.epoch_batches(cfg.batch_size, &mut shuffle) {
            let aug = cfg.standard_augment.then_some((&augment, &mut aug_rng));
            let batch = train.batch(&idx, aug, dtype, &device)?;
            let mixed = if cfg.mix_probability >= 1.0 || gate.random::<f64>() < cfg.mix_probability {
                augmenter.augment(&batch, &mut mix_rng)?
            } else {
                NoMix.augment(&batch, &mut mix_rng)?
            };
            let loss = task_step(&model, &mut opt, &mixed, &mut guard, step)?;
            step += 1;
            total += loss * idx.len() as f64;
            count += idx.len();
        }
        let acc = evaluate(&model, test, cfg.eval_batch_size, top5)?;
        log::info!(
            "epoch {}: loss {:.4}, top-1 {:.2}%",
            epoch + 1,
            total / count.max(1) as f64,
            acc.top1 * 100.0
        );
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            train_loss: total / count.max(1) as f64,
            lr,
            top1_pct: Some(acc.top1 * 100.0),
            top5_pct: acc.top5.map(|v| v * 100.0),
            seconds: start.elapsed().as_secs_f64(),
            tau: None,
        })?;
    }
    Ok(TaskRun { model, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_at_milestones() {
        let s = LrSchedule {
            initial: 0.1,
            milestones: vec![2, 4],
            factor: 0.1,
        };
        assert_eq!(s.lr_at(0), 0.1);
        assert_eq!(s.lr_at(1), 0.1);
        assert!((s.lr_at(2) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(5) - 0.001).abs() < 1e-15);
        assert!(s.validate(5).is_ok());
        assert!(s.validate(4).is_err());
    }

    #[test]
    fn non_increasing_milestones_are_rejected() {
        let s = LrSchedule {
            initial: 0.1,
            milestones: vec![3, 3],
            factor: 0.1,
        };
        assert!(matches!(s.validate(10), Err(Error::Config(_))));
    }

    #[test]
    fn strategy_ids_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.id().parse::<Strategy>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.id()));
        }
    }
}
