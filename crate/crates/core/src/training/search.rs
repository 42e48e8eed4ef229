use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::loss::{scalar, soft_cross_entropy};
use super::metrics::{EpochMetrics, RunMetrics};
use crate::data::{Dataset, ImageBatch, StandardAugment};
use crate::error::{Error, Result};
use crate::mixer::{mix_batch, MixOutcome, MixSettings, MixStrategy, MixerConfig, MixerParams};
use crate::nn::{grad_norm, Sgd, SgdConfig};
use crate::rng::{Rng, SeedStreams};
use crate::saliency::{CamTarget, TeacherHandle};
use crate::viz::{tensor_tiles, ImageGrid};

fn default_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    #[serde(default)]
    pub cam_target: CamTarget,
    /// Random crop + flip on the search batches.
    #[serde(default)]
    pub standard_augment: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 1e-2,
            momentum: 0.9,
            epochs: 100,
            batch_size: 128,
            alpha: 1.0,
            cam_target: CamTarget::Label,
            standard_augment: false,
        }
    }
}

impl SearchConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn settings(&self) -> MixSettings {
        MixSettings {
            strategy: MixStrategy::Full,
            alpha: self.alpha,
            cam_target: self.cam_target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("search optimizer settings out of range".into()));
        }
        if self.batch_size == 0 || !(self.alpha > 0.0) {
            return Err(Error::Config("search batch size and alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Aborts training after `limit` consecutive non-finite losses, dumping
/// the offending mixed batch as an image grid.
#[derive(Debug, Clone)]
pub struct DivergenceGuard {
    limit: usize,
    streak: usize,
    dump_dir: Option<PathBuf>,
}

impl DivergenceGuard {
    pub fn new(dump_dir: Option<&Path>) -> Self {
        Self {
            limit: 3,
            streak: 0,
            dump_dir: dump_dir.map(Path::to_path_buf),
        }
    }

    /// `Ok(true)` when the loss is finite and the update may proceed.
    pub fn check(&mut self, step: usize, loss: f64, images: &Tensor) -> Result<bool> {
        if loss.is_finite() {
            self.streak = 0;
            return Ok(true);
        }
        self.streak += 1;
        log::warn!("non-finite loss at step {step} ({} in a row)", self.streak);
        if self.streak < self.limit {
            return Ok(false);
        }
        let dump = match &self.dump_dir {
            Some(dir) => {
                let path = dir.join(format!("divergence-step{step}.png"));
                let mut grid = ImageGrid::new();
                grid.push_row(tensor_tiles(images, None)?);
                grid.save_png(&path)?;
                Some(path)
            }
            None => None,
        };
        Err(Error::Divergence {
            step,
            message: format!("loss was non-finite for {} consecutive steps", self.streak),
            dump,
        })
    }
}

/// Teacher cross-entropy on a freshly mixed batch; differentiable in the mixer.
pub fn search_loss(
    batch: &ImageBatch,
    teacher: &TeacherHandle,
    params: &MixerParams,
    cfg: &SearchConfig,
    rng: &mut Rng,
) -> Result<(Tensor, MixOutcome)> {
    let outcome = mix_batch(batch, teacher, params, &cfg.settings(), rng)?;
    let images = outcome.batch.images.to_dtype(teacher.dtype())?;
    let loss = soft_cross_entropy(&teacher.logits(&images)?, &outcome.batch.labels)?;
    Ok((loss, outcome))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchStep {
    pub loss: f64,
    pub transform_grad_norm: f64,
    pub mask_grad_norm: f64,
    pub updated: bool,
}

/// One optimizer update of the mixer. Only mixer variables are registered
/// with `opt`; the teacher holds plain tensors and cannot change.
#[allow(clippy::too_many_arguments)]
pub fn search_step(
    batch: &ImageBatch,
    teacher: &TeacherHandle,
    params: &MixerParams,
    opt: &mut Sgd,
    cfg: &SearchConfig,
    rng: &mut Rng,
    guard: &mut DivergenceGuard,
    step: usize,
) -> Result<SearchStep> {
    let (loss, outcome) = search_loss(batch, teacher, params, cfg, rng)?;
    let value = scalar(&loss)?;
    if !guard.check(step, value, &outcome.batch.images)? {
        return Ok(SearchStep {
            loss: value,
            transform_grad_norm: f64::NAN,
            mask_grad_norm: f64::NAN,
            updated: false,
        });
    }
    let grads = loss.backward()?;
    let norm = |vars: Vec<(&str, &candle_core::Var)>| {
        let vars: Vec<_> = vars.into_iter().map(|(_, v)| v).collect();
        grad_norm(&grads, &vars)
    };
    let transform_grad_norm = norm(params.transform_vars())?;
    let mask_grad_norm = norm(params.mask_vars())?;
    opt.step(&grads)?;
    Ok(SearchStep {
        loss: value,
        transform_grad_norm,
        mask_grad_norm,
        updated: true,
    })
}

pub struct SearchRun {
    pub params: MixerParams,
    pub metrics: RunMetrics,
}

/// Optimizes a freshly initialized mixer against the frozen teacher.
pub fn train_mixer(
    data: &Dataset,
    teacher: &TeacherHandle,
    mixer: MixerConfig,
    cfg: &SearchConfig,
    seed: u64,
    dump_dir: Option<&Path>,
) -> Result<SearchRun> {
    cfg.validate()?;
    let spec = teacher.spec();
    if (spec.channels, spec.height, spec.width) != data.dims() {
        return Err(Error::Config(format!(
            "teacher expects {}x{}x{} inputs, dataset is {:?}",
            spec.channels,
            spec.height,
            spec.width,
            data.dims()
        )));
    }
    if spec.num_classes != data.num_classes {
        return Err(Error::Config(format!(
            "teacher has {} classes, dataset has {}",
            spec.num_classes, data.num_classes
        )));
    }
    if (mixer.height, mixer.width) != (data.height, data.width) {
        return Err(Error::Config(format!(
            "mixer resolution {}x{} differs from the dataset's {}x{}",
            mixer.height, mixer.width, data.height, data.width
        )));
    }
    let streams = SeedStreams::new(seed);
    let dtype = teacher.dtype();
    let device = teacher.model().store().device().clone();
    let params = MixerParams::init(mixer, streams.stream("search/init"), dtype, &device)?;
    let vars = params.store().trainable().into_iter().map(|(_, v)| v.clone()).collect();
    let mut opt = Sgd::new(vars, cfg.sgd());
    let mut shuffle = streams.stream("search/shuffle");
    let mut aug_rng = streams.stream("search/augment");
    let mut mix_rng = streams.stream("search/mix");
    let augment = StandardAugment::default();
    let mut guard = DivergenceGuard::new(dump_dir);
    let mut metrics = RunMetrics::default();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (mut total, mut count) = (0.0, 0usize);
        for idx in data.epoch_batches(cfg.batch_size, &mut shuffle) {
            if idx.len() < params.k() {
                continue;
            }
            let aug = cfg.standard_augment.then_some((&augment, &mut aug_rng));
            let batch = data.batch(&idx, aug, dtype, &device)?;
            let s = search_step(&batch, teacher, &params, &mut opt, cfg, &mut mix_rng, &mut guard, step)?;
            step += 1;
            if s.updated {
                total += s.loss * idx.len() as f64;
                count += idx.len();
            }
        }
        let tau = params.tau()?;
        log::info!(
            "search epoch {epoch}: loss {:.4}, tau {tau:.4}",
            total / count.max(1) as f64
        );
        metrics.push(EpochMetrics {
            epoch,
            train_loss: if count > 0 { total / count as f64 } else { f64::NAN },
            lr: cfg.lr,
            top1_pct: None,
            top5_pct: None,
            seconds: start.elapsed().as_secs_f64(),
            tau: Some(tau),
        })?;
    }
    Ok(SearchRun { params, metrics })
}
