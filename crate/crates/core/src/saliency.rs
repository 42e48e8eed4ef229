//! Class-activation-map saliency from a frozen teacher.

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::models::{load_checkpoint, ArchSpec, Model};

/// Heatmap in `[0, 1]`, indexed `[[row, col]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    values: Array2<f64>,
}

impl SaliencyMap {
    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Wraps values already known to lie in `[0, 1]`.
    pub fn from_unit(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("saliency values must lie in [0, 1]".into()));
        }
        Ok(Self { values })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_unit(Array2::from_elem((height, width), value))
    }
}

/// Min-max rescale to `[0, 1]`; a constant map becomes all 0.5.
pub fn normalize_map(raw: &Array2<f64>) -> Result<SaliencyMap> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("saliency map contains NaN or Inf".into()));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = if max > min {
        let range = max - min;
        raw.mapv(|v| (v - min) / range)
    } else {
        Array2::from_elem(raw.raw_dim(), 0.5)
    };
    Ok(SaliencyMap { values })
}

/// Source coordinate and blend weight along one axis for half-pixel-centred
/// bilinear resampling with edge clamping.
fn axis_taps(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let t = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, t)
        })
        .collect()
}

/// Bilinear resize of an arbitrary real grid. Written as nested lerps so a
/// constant grid is reproduced exactly at every size.
pub fn bilinear_resize(src: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    if src.dim() == (height, width) {
        return src.clone();
    }
    let rows = axis_taps(height, src.nrows());
    let cols = axis_taps(width, src.ncols());
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, ty) = rows[y];
        let (x0, x1, tx) = cols[x];
        let top = lerp(src[[y0, x0]], src[[y0, x1]], tx);
        let bottom = lerp(src[[y1, x0]], src[[y1, x1]], tx);
        lerp(top, bottom, ty)
    })
}

pub fn resize_saliency(map: &SaliencyMap, height: usize, width: usize) -> Result<SaliencyMap> {
    if height == 0 || width == 0 {
        return Err(Error::Input("resize target must be at least 1x1".into()));
    }
    Ok(SaliencyMap {
        values: bilinear_resize(&map.values, height, width).mapv(|v| v.clamp(0.0, 1.0)),
    })
}

/// Which class a CAM is computed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamTarget {
    /// Ground-truth label (every training path has one).
    #[default]
    Label,
    /// Teacher's argmax; for unlabelled inputs.
    Predicted,
}

/// Shared, read-only handle to a frozen teacher classifier.
#[derive(Clone)]
pub struct TeacherHandle {
    model: Arc<Model>,
    id: String,
}

impl std::fmt::Debug for TeacherHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TeacherHandle").field("id", &self.id).finish()
    }
}

impl TeacherHandle {
    /// Snapshots `model`; later updates to `model` are not visible.
    pub fn freeze(model: &Model, id: impl Into<String>) -> Result<Self> {
        Ok(Self {
            model: Arc::new(model.freeze()?),
            id: id.into(),
        })
    }

    /// Wraps a model whose parameters are already frozen.
    pub fn from_frozen(model: Model, id: impl Into<String>) -> Result<Self> {
        if !model.store().is_frozen() {
            return Err(Error::Input("teacher parameters must be frozen".into()));
        }
        Ok(Self {
            model: Arc::new(model),
            id: id.into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (model, meta) = load_checkpoint(path, true)?;
        let id = format!(
            "{}:{}",
            meta.arch.family,
            &meta.weights_digest[..meta.weights_digest.len().min(16)]
        );
        Self::from_frozen(model, id)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn spec(&self) -> &ArchSpec {
        self.model.spec()
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn dtype(&self) -> DType {
        self.model.store().dtype()
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.model.forward_t(x, false)
    }

    pub fn digest(&self) -> Result<String> {
        self.model.store().digest()
    }
}

/// Class ids for CAM extraction under the chosen policy.
pub fn cam_classes(batch: &ImageBatch, teacher: &TeacherHandle, target: CamTarget) -> Result<Vec<u32>> {
    match target {
        CamTarget::Label => Ok(batch.labels.clone()),
        CamTarget::Predicted => Ok(teacher
            .logits(&batch.images)?
            .argmax(1)?
            .to_dtype(DType::U32)?
            .to_vec1::<u32>()?),
    }
}

/// CAM per image: channel-weighted sum of final-conv features, rectified,
/// bilinearly upsampled to the image size, then min-max normalized.
pub fn compute_cam(images: &Tensor, class_ids: &[u32], teacher: &TeacherHandle) -> Result<Vec<SaliencyMap>> {
    let (b, c, h, w) = images.dims4()?;
    let spec = teacher.spec();
    if (c, h, w) != (spec.channels, spec.height, spec.width) {
        return Err(Error::Input(format!(
            "images are {c}x{h}x{w}, teacher expects {}x{}x{}",
            spec.channels, spec.height, spec.width
        )));
    }
    if class_ids.len() != b {
        return Err(Error::Input(format!("{b} images but {} class ids", class_ids.len())));
    }
    if let Some(bad) = class_ids.iter().find(|&&id| id as usize >= spec.num_classes) {
        return Err(Error::Input(format!(
            "class id {bad} outside {} classes",
            spec.num_classes
        )));
    }
    let cam = teacher.model().cam_features(&images.to_dtype(teacher.dtype())?)?;
    let (_, k, fh, fw) = cam.features.dims4()?;
    let feats = cam.features.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let weights = cam.head_weight.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    class_ids
        .iter()
        .enumerate()
        .map(|(i, &class)| {
            let wc = &weights[class as usize];
            let base = i * k * fh * fw;
            let raw = Array2::from_shape_fn((fh, fw), |(y, x)| {
                let v: f64 = (0..k).map(|ch| wc[ch] * feats[base + (ch * fh + y) * fw + x]).sum();
                v.max(0.0)
            });
            normalize_map(&bilinear_resize(&raw, h, w))
        })
        .collect()
}

/// Stacks maps into a `(B, 1, H, W)` tensor.
pub fn maps_to_tensor(maps: &[SaliencyMap], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Input("no saliency maps to stack".into()))?;
    let (h, w) = (first.height(), first.width());
    if maps.iter().any(|m| (m.height(), m.width()) != (h, w)) {
        return Err(Error::Input("saliency maps differ in size".into()));
    }
    let data: Vec<f64> = maps.iter().flat_map(|m| m.values.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (maps.len(), 1, h, w), device)?.to_dtype(dtype)?)
}
