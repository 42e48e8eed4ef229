use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// Fraction of samples whose label is the top prediction.
    pub top1: f64,
    /// Fraction whose label is among the five highest logits.
    pub top5: Option<f64>,
    pub count: usize,
}

/// Zero-based rank of the label under the logits. Ties go to the lower
/// class index, so a tied label ranks behind lower-indexed classes.
pub fn label_rank(logits: &[f64], label: usize) -> usize {
    let target = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > target || (v == target && c < label))
        .count()
}

/// Number of rows whose label ranks within the top `k`.
pub fn topk_hits(logits: &Tensor, labels: &[u32], k: usize) -> Result<usize> {
    let rows = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    if rows.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} logit rows for {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let mut hits = 0;
    for (row, &y) in rows.iter().zip(labels) {
        if y as usize >= row.len() {
            return Err(Error::Input(format!("label {y} outside {} classes", row.len())));
        }
        if label_rank(row, y as usize) < k {
            hits += 1;
        }
    }
    Ok(hits)
}

/// Top-1 (and optionally top-5) accuracy in evaluation mode, in index order.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize, top5: bool) -> Result<Accuracy> {
    if top5 && data.num_classes < 5 {
        return Err(Error::Config(format!(
            "top-5 accuracy needs at least 5 classes, dataset has {}",
            data.num_classes
        )));
    }
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let dtype = model.store().dtype();
    let device = model.store().device().clone();
    let (mut h1, mut h5) = (0, 0);
    for idx in data.ordered_batches(batch_size) {
        let batch = data.batch(&idx, None, dtype, &device)?;
        let logits = model.forward_t(&batch.images, false)?;
        h1 += topk_hits(&logits, &batch.labels, 1)?;
        if top5 {
            h5 += topk_hits(&logits, &batch.labels, 5)?;
        }
    }
    let n = data.len() as f64;
    Ok(Accuracy {
        top1: h1 as f64 / n,
        top5: top5.then(|| h5 as f64 / n),
        count: data.len(),
    })
}
