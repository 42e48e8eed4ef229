use candle_core::{DType, Device, Tensor};

use super::sampling::{sample_coefficients, sample_noise, MixCoefficients, NoiseField};
use super::warp::{apply_affine, identity_theta};
use super::{MixStrategy, MixerParams};
use crate::data::{pair_batch, ImageBatch, Pairing};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::saliency::{
    cam_classes, compute_cam, maps_to_tensor, resize_saliency, CamTarget, SaliencyMap, TeacherHandle,
};

/// Largest tolerated deviation of a per-pixel mask sum from 1.
pub const MASK_SUM_TOLERANCE: f64 = 1e-6;

/// Everything the predictors see for one batch of k-tuples.
#[derive(Debug, Clone)]
pub struct MixInputs {
    /// k tensors `(B, C, H, W)`; entry `j` holds the `j`-th partner of every sample.
    pub images: Vec<Tensor>,
    /// k saliency tensors `(B, 1, H, W)` aligned with `images`.
    pub cams: Vec<Tensor>,
    /// Saliencies resized to the transform net's native resolution;
    /// `None` when the batch is already native.
    pub native_cams: Option<Vec<Tensor>>,
    /// `(B, k)` mixing coefficients.
    pub coeffs: Tensor,
    /// `(B, 1, h, w)` noise at native resolution.
    pub noise: Tensor,
}

impl MixInputs {
    pub fn k(&self) -> usize {
        self.images.len()
    }

    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.coeffs.dim(0)?)
    }

    fn check(&self, params: &MixerParams) -> Result<()> {
        let k = params.k();
        if self.images.len() != k || self.cams.len() != k {
            return Err(Error::Input(format!(
                "mixer built for k={k}, got {} images and {} saliency maps",
                self.images.len(),
                self.cams.len()
            )));
        }
        let (b, _, h, w) = self.images[0].dims4()?;
        for img in &self.images {
            let (bi, _, hi, wi) = img.dims4()?;
            if (bi, hi, wi) != (b, h, w) {
                return Err(Error::Input("mixing inputs differ in shape".into()));
            }
        }
        for cam in &self.cams {
            if cam.dims() != [b, 1, h, w] {
                return Err(Error::Input(format!(
                    "saliency must be ({b}, 1, {h}, {w}), got {:?}",
                    cam.dims()
                )));
            }
        }
        if self.coeffs.dims() != [b, k] {
            return Err(Error::Input(format!(
                "coefficients must be ({b}, {k}), got {:?}",
                self.coeffs.dims()
            )));
        }
        let native = [b, 1, params.config().height, params.config().width];
        if self.noise.dims() != native {
            return Err(Error::Input(format!(
                "noise must be {native:?}, got {:?}",
                self.noise.dims()
            )));
        }
        match &self.native_cams {
            Some(cams) if cams.len() != k || cams.iter().any(|c| c.dims() != native) => Err(Error::Input(format!(
                "native saliency must be {k} tensors of {native:?}"
            ))),
            None if (h, w) != (native[2], native[3]) => Err(Error::Input(format!(
                "batch is {h}x{w} but the mixer is native at {}x{}; supply resized saliency",
                native[2], native[3]
            ))),
            _ => Ok(()),
        }
    }
}

/// `(B, k)` coefficients broadcast into `k - 1` constant planes of size `(h, w)`.
fn coefficient_planes(coeffs: &Tensor, h: usize, w: usize) -> Result<Vec<Tensor>> {
    let (b, k) = coeffs.dims2()?;
    (0..k - 1)
        .map(|j| {
            Ok(coeffs
                .narrow(1, j, 1)?
                .reshape((b, 1, 1, 1))?
                .broadcast_as((b, 1, h, w))?
                .contiguous()?)
        })
        .collect()
}

impl MixerParams {
    /// Transform-net input: k saliency channels, k-1 coefficient planes, one noise plane.
    pub fn transform_input(&self, inputs: &MixInputs) -> Result<Tensor> {
        inputs.check(self)?;
        let dtype = self.dtype();
        let cams = inputs.native_cams.as_ref().unwrap_or(&inputs.cams);
        let (h, w) = (self.config().height, self.config().width);
        let mut channels = cams
            .iter()
            .map(|c| Ok(c.to_dtype(dtype)?))
            .collect::<Result<Vec<_>>>()?;
        channels.extend(coefficient_planes(&inputs.coeffs.to_dtype(dtype)?, h, w)?);
        channels.push(inputs.noise.to_dtype(dtype)?);
        Ok(Tensor::cat(&channels, 1)?)
    }

    /// `(B, k, 2, 3)` affine parameters.
    pub fn predict_transforms(&self, inputs: &MixInputs) -> Result<Tensor> {
        self.transform_net().forward(&self.transform_input(inputs)?)
    }

    /// Raw `(B, k, H, W)` mask logits from warped saliencies and coefficients.
    pub fn mask_logits(&self, warped_cams: &[Tensor], coeffs: &Tensor) -> Result<Tensor> {
        let k = self.k();
        if warped_cams.len() != k {
            return Err(Error::Input(format!(
                "mixer built for k={k}, got {} saliency maps",
                warped_cams.len()
            )));
        }
        let (b, _, h, w) = warped_cams[0].dims4()?;
        if warped_cams.iter().any(|c| c.dims() != [b, 1, h, w]) {
            return Err(Error::Input("warped saliency maps differ in shape".into()));
        }
        if coeffs.dims() != [b, k] {
            return Err(Error::Input(format!(
                "coefficients must be ({b}, {k}), got {:?}",
                coeffs.dims()
            )));
        }
        let dtype = self.dtype();
        let mut channels = warped_cams
            .iter()
            .map(|c| Ok(c.to_dtype(dtype)?))
            .collect::<Result<Vec<_>>>()?;
        channels.extend(coefficient_planes(&coeffs.to_dtype(dtype)?, h, w)?);
        self.mask_net().forward(&Tensor::cat(&channels, 1)?)
    }

    /// Temperature-softmax masks `(B, k, H, W)`.
    pub fn predict_masks(&self, warped_cams: &[Tensor], coeffs: &Tensor) -> Result<Tensor> {
        masks_from_logits(&self.mask_logits(warped_cams, coeffs)?, &self.tau_tensor()?)
    }
}

/// Per-pixel softmax over dim 1 of `logits / tau`; `tau` is a scalar or `(1,)` tensor.
pub fn masks_from_logits(logits: &Tensor, tau: &Tensor) -> Result<Tensor> {
    let tau = tau.to_dtype(logits.dtype())?.reshape((1, 1, 1, 1))?;
    Ok(candle_nn::ops::softmax(&logits.broadcast_div(&tau)?, 1)?)
}

/// Mixed images with their soft labels.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub images: Tensor,
    /// `(B, classes)` rows on the class simplex.
    pub labels: Tensor,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.images.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Masked sum `Σ m_j ⊙ x_j`; fails if the masks do not sum to one per pixel.
pub fn combine(warped: &[Tensor], masks: &Tensor) -> Result<Tensor> {
    let (b, k, h, w) = masks.dims4()?;
    if warped.len() != k {
        return Err(Error::Input(format!("{k} masks but {} images", warped.len())));
    }
    let deviation = (masks.sum(1)? - 1.0)?
        .abs()?
        .flatten_all()?
        .max(0)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    if !(deviation <= MASK_SUM_TOLERANCE) {
        return Err(Error::Consistency(format!(
            "mixing masks deviate from a per-pixel sum of 1 by {deviation:e}"
        )));
    }
    let mut out: Option<Tensor> = None;
    for (j, x) in warped.iter().enumerate() {
        let (bx, _, hx, wx) = x.dims4()?;
        if (bx, hx, wx) != (b, h, w) {
            return Err(Error::Input("images and masks differ in shape".into()));
        }
        let term = x.broadcast_mul(&masks.narrow(1, j, 1)?.to_dtype(x.dtype())?)?;
        out = Some(match out {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    out.ok_or_else(|| Error::Input("nothing to mix".into()))
}

/// `y' = Σ λ_j e_{y_j}` per sample; `labels[j][i]` is the label of partner `j` of sample `i`.
pub fn mix_labels(
    labels: &[Vec<u32>],
    coeffs: &[MixCoefficients],
    classes: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let b = coeffs.len();
    if labels.iter().any(|l| l.len() != b) {
        return Err(Error::Input("label and coefficient counts differ".into()));
    }
    let mut out = vec![0.0f64; b * classes];
    for (i, c) in coeffs.iter().enumerate() {
        if c.k() != labels.len() {
            return Err(Error::Input(format!(
                "{} coefficients for {} partners",
                c.k(),
                labels.len()
            )));
        }
        for (j, &lambda) in c.as_slice().iter().enumerate() {
            let y = labels[j][i] as usize;
            if y >= classes {
                return Err(Error::Input(format!("label {y} outside {classes} classes")));
            }
            out[i * classes + y] += lambda;
        }
    }
    Ok(Tensor::from_vec(out, (b, classes), device)?.to_dtype(dtype)?)
}

/// Warps every partner by its theta, blends with the masks and mixes labels.
pub fn mix(
    images: &[Tensor],
    thetas: &Tensor,
    masks: &Tensor,
    coeffs: &[MixCoefficients],
    labels: &[Vec<u32>],
    classes: usize,
    padding: super::WarpPadding,
) -> Result<MixedBatch> {
    let k = images.len();
    let b = coeffs.len();
    if thetas.dims() != [b, k, 2, 3] {
        return Err(Error::Input(format!(
            "thetas must be ({b}, {k}, 2, 3), got {:?}",
            thetas.dims()
        )));
    }
    let warped = images
        .iter()
        .enumerate()
        .map(|(j, x)| apply_affine(x, &thetas.narrow(1, j, 1)?.squeeze(1)?, padding))
        .collect::<Result<Vec<_>>>()?;
    let mixed = combine(&warped, masks)?;
    let labels = mix_labels(labels, coeffs, classes, mixed.dtype(), mixed.device())?;
    Ok(MixedBatch { images: mixed, labels })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixSettings {
    pub strategy: MixStrategy,
    pub alpha: f64,
    pub cam_target: CamTarget,
}

impl Default for MixSettings {
    fn default() -> Self {
        Self {
            strategy: MixStrategy::Full,
            alpha: 1.0,
            cam_target: CamTarget::Label,
        }
    }
}

/// Intermediate tensors of one mix, for inspection and visualization.
#[derive(Debug, Clone)]
pub struct MixDetails {
    pub pairing: Pairing,
    pub coeffs: Vec<MixCoefficients>,
    pub noise: Vec<NoiseField>,
    /// CAMs of the original batch, in batch order.
    pub saliency: Vec<SaliencyMap>,
    /// `(B, k, 2, 3)`
    pub thetas: Tensor,
    /// k tensors `(B, C, H, W)`
    pub warped_images: Vec<Tensor>,
    /// k tensors `(B, 1, H, W)`
    pub warped_cams: Vec<Tensor>,
    /// `(B, k, H, W)`
    pub masks: Tensor,
}

#[derive(Debug, Clone)]
pub struct MixOutcome {
    pub batch: MixedBatch,
    pub details: MixDetails,
}

fn coeff_tensor(coeffs: &[MixCoefficients], dtype: DType, device: &Device) -> Result<Tensor> {
    let k = coeffs[0].k();
    let flat: Vec<f64> = coeffs.iter().flat_map(|c| c.as_slice().iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (coeffs.len(), k), device)?.to_dtype(dtype)?)
}

fn noise_tensor(noise: &[NoiseField], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = noise[0].values().dim();
    let flat: Vec<f64> = noise.iter().flat_map(|n| n.values().iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (noise.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

fn gather(x: &Tensor, slot: &[usize]) -> Result<Tensor> {
    let idx: Vec<u32> = slot.iter().map(|&i| i as u32).collect();
    let idx = Tensor::from_vec(idx, slot.len(), x.device())?;
    Ok(x.index_select(&idx, 0)?)
}

/// One full mixing pass over a labelled batch.
///
/// Randomness is consumed in a fixed order (pairing, coefficients, noise)
/// regardless of strategy, so strategies see identical draws for a seed.
pub fn mix_batch(
    batch: &ImageBatch,
    teacher: &TeacherHandle,
    params: &MixerParams,
    settings: &MixSettings,
    rng: &mut Rng,
) -> Result<MixOutcome> {
    let k = params.k();
    let b = batch.len();
    if b < k {
        return Err(Error::Input(format!("batch of {b} cannot form {k}-tuples")));
    }
    let (nh, nw) = (params.config().height, params.config().width);
    let pairing = pair_batch(b, k, rng);
    let coeffs = (0..b)
        .map(|_| sample_coefficients(settings.alpha, k, rng))
        .collect::<Result<Vec<_>>>()?;
    let noise: Vec<NoiseField> = (0..b)
        .map(|_| sample_noise(rng, (nh, nw), params.config().noise_grid))
        .collect();
    mix_with(batch, teacher, params, settings, pairing, coeffs, noise)
}

/// [`mix_batch`] with the random draws supplied by the caller.
pub fn mix_with(
    batch: &ImageBatch,
    teacher: &TeacherHandle,
    params: &MixerParams,
    settings: &MixSettings,
    pairing: Pairing,
    coeffs: Vec<MixCoefficients>,
    noise: Vec<NoiseField>,
) -> Result<MixOutcome> {
    let k = params.k();
    let b = batch.len();
    if pairing.k() != k || pairing.batch_size() != b || coeffs.len() != b || noise.len() != b {
        return Err(Error::Input(format!(
            "mixing a batch of {b} with a {k}-way mixer needs a matching pairing, coefficients and noise"
        )));
    }
    let dtype = params.dtype();
    let device = params.device().clone();
    let (_, _, h, w) = batch.images.dims4()?;
    let (nh, nw) = (params.config().height, params.config().width);
    if noise.iter().any(|n| n.values().dim() != (nh, nw)) {
        return Err(Error::Input(format!("noise must be {nh}x{nw}")));
    }

    let classes = cam_classes(batch, teacher, settings.cam_target)?;
    let saliency = compute_cam(&batch.images, &classes, teacher)?;
    let cam_all = maps_to_tensor(&saliency, dtype, &device)?;
    let native_all = if (h, w) == (nh, nw) {
        None
    } else {
        let resized = saliency
            .iter()
            .map(|m| resize_saliency(m, nh, nw))
            .collect::<Result<Vec<_>>>()?;
        Some(maps_to_tensor(&resized, dtype, &device)?)
    };

    let images_all = batch.images.to_dtype(dtype)?;
    let images = (0..k)
        .map(|j| gather(&images_all, pairing.slot(j)))
        .collect::<Result<Vec<_>>>()?;
    let cams = (0..k)
        .map(|j| gather(&cam_all, pairing.slot(j)))
        .collect::<Result<Vec<_>>>()?;
    let native_cams = native_all
        .map(|t| (0..k).map(|j| gather(&t, pairing.slot(j))).collect::<Result<Vec<_>>>())
        .transpose()?;
    let inputs = MixInputs {
        images,
        cams,
        native_cams,
        coeffs: coeff_tensor(&coeffs, dtype, &device)?,
        noise: noise_tensor(&noise, dtype, &device)?,
    };
    let labels: Vec<Vec<u32>> = (0..k)
        .map(|j| pairing.slot(j).iter().map(|&i| batch.labels[i]).collect())
        .collect();

    let padding = params.config().padding;
    let strategy = settings.strategy;
    let thetas = if strategy.predicts_transforms() {
        params.predict_transforms(&inputs)?
    } else {
        inputs.check(params)?;
        identity_theta(b * k, dtype, &device)?.reshape((b, k, 2, 3))?
    };
    let (warped_images, warped_cams) = if strategy.predicts_transforms() {
        let warp = |xs: &[Tensor]| -> Result<Vec<Tensor>> {
            xs.iter()
                .enumerate()
                .map(|(j, x)| apply_affine(x, &thetas.narrow(1, j, 1)?.squeeze(1)?, padding))
                .collect()
        };
        (warp(&inputs.images)?, warp(&inputs.cams)?)
    } else {
        (inputs.images.clone(), inputs.cams.clone())
    };
    let masks = if strategy.predicts_masks() {
        params.predict_masks(&warped_cams, &inputs.coeffs)?
    } else {
        masks_from_logits(&Tensor::cat(&warped_cams, 1)?, &params.tau_tensor()?)?
    };
    let mixed = combine(&warped_images, &masks)?;
    let soft = mix_labels(&labels, &coeffs, batch.num_classes, dtype, &device)?;
    Ok(MixOutcome {
        batch: MixedBatch {
            images: mixed,
            labels: soft,
        },
        details: MixDetails {
            pairing,
            coeffs,
            noise,
            saliency,
            thetas,
            warped_images,
            warped_cams,
            masks,
        },
    })
}
