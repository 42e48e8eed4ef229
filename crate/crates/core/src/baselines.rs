//! Reference mixing methods: Mixup, CutMix and an iterative mask optimizer
//! used as the timing comparator.

use candle_core::{Tensor, Var};
use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use crate::data::{pair_batch, ImageBatch, Pairing};
use crate::error::{Error, Result};
use crate::mixer::{mix_labels, MixCoefficients, MixedBatch};
use crate::rng::Rng;
use crate::saliency::TeacherHandle;
use crate::training::soft_cross_entropy;

fn beta(alpha: f64) -> Result<Beta<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Param(format!("alpha must be positive, got {alpha}")));
    }
    Beta::new(alpha, alpha).map_err(|e| Error::Param(e.to_string()))
}

fn partner(x: &Tensor, slot: &[usize]) -> Result<Tensor> {
    let idx: Vec<u32> = slot.iter().map(|&i| i as u32).collect();
    Ok(x.index_select(&Tensor::from_vec(idx, slot.len(), x.device())?, 0)?)
}

fn pair_labels(batch: &ImageBatch, pairing: &Pairing) -> Vec<Vec<u32>> {
    (0..pairing.k())
        .map(|j| pairing.slot(j).iter().map(|&i| batch.labels[i]).collect())
        .collect()
}

fn two_way(lambdas: &[f64]) -> Result<Vec<MixCoefficients>> {
    lambdas
        .iter()
        .map(|&l| {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Param(format!("mixing weight {l} outside [0, 1]")));
            }
            MixCoefficients::new(vec![l, 1.0 - l])
        })
        .collect()
}

/// `x' = λ x₁ + (1 - λ) x₂` with one λ per sample.
pub fn mixup_with(batch: &ImageBatch, pairing: &Pairing, lambdas: &[f64]) -> Result<MixedBatch> {
    let b = batch.len();
    if pairing.k() != 2 || pairing.batch_size() != b || lambdas.len() != b {
        return Err(Error::Input(
            "mixup needs a 2-way pairing and one weight per sample".into(),
        ));
    }
    let x = &batch.images;
    let coeffs = two_way(lambdas)?;
    let l = Tensor::from_vec(lambdas.to_vec(), (b, 1, 1, 1), x.device())?.to_dtype(x.dtype())?;
    let x2 = partner(x, pairing.slot(1))?;
    let images = (x2.broadcast_add(&(x - &x2)?.broadcast_mul(&l)?))?;
    let labels = mix_labels(
        &pair_labels(batch, pairing),
        &coeffs,
        batch.num_classes,
        x.dtype(),
        x.device(),
    )?;
    Ok(MixedBatch { images, labels })
}

pub fn mixup(batch: &ImageBatch, alpha: f64, rng: &mut Rng) -> Result<MixedBatch> {
    let dist = beta(alpha)?;
    let pairing = pair_batch(batch.len(), 2, rng);
    let lambdas: Vec<f64> = (0..batch.len()).map(|_| dist.sample(rng)).collect();
    mixup_with(batch, &pairing, &lambdas)
}

/// Half-open pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl PatchBox {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    /// Box of nominal area `(1 - λ) H W` centred uniformly at random, clipped to the image.
    pub fn sample(lambda: f64, height: usize, width: usize, rng: &mut Rng) -> Self {
        let ratio = (1.0 - lambda).max(0.0).sqrt();
        let ch = (height as f64 * ratio) as i64;
        let cw = (width as f64 * ratio) as i64;
        let cy = rng.random_range(0..height) as i64;
        let cx = rng.random_range(0..width) as i64;
        let clip = |v: i64, n: usize| v.clamp(0, n as i64) as usize;
        Self {
            y0: clip(cy - ch / 2, height),
            y1: clip(cy + ch / 2, height),
            x0: clip(cx - cw / 2, width),
            x1: clip(cx + cw / 2, width),
        }
    }
}

/// Pastes each partner's box region into the sample; the label weight of
/// the sample is the fraction of pixels outside the box.
pub fn cutmix_with(batch: &ImageBatch, pairing: &Pairing, boxes: &[PatchBox]) -> Result<MixedBatch> {
    let b = batch.len();
    if pairing.k() != 2 || pairing.batch_size() != b || boxes.len() != b {
        return Err(Error::Input(
            "cutmix needs a 2-way pairing and one box per sample".into(),
        ));
    }
    let x = &batch.images;
    let (_, _, h, w) = x.dims4()?;
    if boxes.iter().any(|r| r.y0 > r.y1 || r.x0 > r.x1 || r.y1 > h || r.x1 > w) {
        return Err(Error::Input(format!("patch box outside the {h}x{w} image")));
    }
    let mut mask = vec![0.0f64; b * h * w];
    for (i, r) in boxes.iter().enumerate() {
        for y in r.y0..r.y1 {
            mask[i * h * w + y * w + r.x0..i * h * w + y * w + r.x1].fill(1.0);
        }
    }
    let lambdas: Vec<f64> = boxes.iter().map(|r| 1.0 - r.area() as f64 / (h * w) as f64).collect();
    let coeffs = two_way(&lambdas)?;
    let mask = Tensor::from_vec(mask, (b, 1, h, w), x.device())?.to_dtype(x.dtype())?;
    let x2 = partner(x, pairing.slot(1))?;
    let images = (x + (&x2 - x)?.broadcast_mul(&mask)?)?;
    let labels = mix_labels(
        &pair_labels(batch, pairing),
        &coeffs,
        batch.num_classes,
        x.dtype(),
        x.device(),
    )?;
    Ok(MixedBatch { images, labels })
}

pub fn cutmix(batch: &ImageBatch, alpha: f64, rng: &mut Rng) -> Result<MixedBatch> {
    let dist = beta(alpha)?;
    let (_, _, h, w) = batch.images.dims4()?;
    let pairing = pair_batch(batch.len(), 2, rng);
    let boxes: Vec<PatchBox> = (0..batch.len())
        .map(|_| {
            let lambda = dist.sample(rng);
            PatchBox::sample(lambda, h, w, rng)
        })
        .collect();
    cutmix_with(batch, &pairing, &boxes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterativeConfig {
    pub steps: usize,
    pub lr: f64,
    pub alpha: f64,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 0.1,
            alpha: 1.0,
        }
    }
}

/// Result of the iterative optimizer; `masks` is the weight of the first input.
#[derive(Debug, Clone)]
pub struct IterativeMix {
    pub batch: MixedBatch,
    pub masks: Tensor,
}

/// Per-pair mask optimization: a sigmoid mask per pair is refined by
/// gradient steps on the teacher's soft cross-entropy against the mixed
/// label, with a penalty tying the mean mask to the sampled weight.
pub fn iterative_mask_optimizer(
    batch: &ImageBatch,
    teacher: &TeacherHandle,
    cfg: &IterativeConfig,
    rng: &mut Rng,
) -> Result<IterativeMix> {
    if cfg.steps == 0 {
        return Err(Error::Param("iterative optimizer needs at least one step".into()));
    }
    let dist = beta(cfg.alpha)?;
    let b = batch.len();
    let dtype = teacher.dtype();
    let x1 = batch.images.to_dtype(dtype)?;
    let (_, _, h, w) = x1.dims4()?;
    let pairing = pair_batch(b, 2, rng);
    let lambdas: Vec<f64> = (0..b).map(|_| dist.sample(rng)).collect();
    let coeffs = two_way(&lambdas)?;
    let target = mix_labels(
        &pair_labels(batch, &pairing),
        &coeffs,
        batch.num_classes,
        dtype,
        x1.device(),
    )?;
    let lambda_t = Tensor::from_vec(lambdas, b, x1.device())?.to_dtype(dtype)?;
    let x2 = partner(&x1, pairing.slot(1))?;
    let diff = (&x1 - &x2)?;

    let logits = Var::from_tensor(&Tensor::zeros((b, 1, h, w), dtype, x1.device())?)?;
    let blend = |u: &Tensor| -> Result<(Tensor, Tensor)> {
        let m = candle_nn::ops::sigmoid(u)?;
        Ok((x2.broadcast_add(&diff.broadcast_mul(&m)?)?, m))
    };
    for _ in 0..cfg.steps {
        let (mixed, m) = blend(logits.as_tensor())?;
        let ce = soft_cross_entropy(&teacher.logits(&mixed)?, &target)?;
        let area = (m.flatten_from(1)?.mean(1)? - &lambda_t)?.sqr()?.mean_all()?;
        let grads = (ce + area)?.backward()?;
        if let Some(g) = grads.get(logits.as_tensor()) {
            logits.set(&(logits.as_tensor() - (g * cfg.lr)?)?)?;
        }
    }
    let (images, masks) = blend(&logits.as_tensor().detach())?;
    Ok(IterativeMix {
        batch: MixedBatch { images, labels: target },
        masks,
    })
}
