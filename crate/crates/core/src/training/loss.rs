use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Tolerance for soft labels to count as lying on the simplex.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Mean over the batch of `-Σ_c y_c log softmax(logits)_c`.
pub fn soft_cross_entropy(logits: &Tensor, soft_labels: &Tensor) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if soft_labels.dims() != [b, c] {
        return Err(Error::Input(format!(
            "soft labels must be ({b}, {c}), got {:?}",
            soft_labels.dims()
        )));
    }
    let host = soft_labels.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    for (i, row) in host.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&v| !(v >= -SIMPLEX_TOLERANCE)) || !((sum - 1.0).abs() <= SIMPLEX_TOLERANCE) {
            return Err(Error::Input(format!("soft label {i} is off the simplex (sum {sum})")));
        }
    }
    let log_p = candle_nn::ops::log_softmax(logits, 1)?;
    let y = soft_labels.to_dtype(logits.dtype())?;
    Ok((log_p * y)?.sum(1)?.neg()?.mean(0)?)
}

/// Scalar value of a loss tensor.
pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
