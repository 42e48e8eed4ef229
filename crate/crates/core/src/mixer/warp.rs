//! Differentiable backward warping by a 2x3 affine map in normalized
//! coordinates (`[-1, 1]`, pixel centres, no corner alignment).

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarpPadding {
    /// Samples outside the source read as 0.
    #[default]
    Zeros,
    /// Coordinates are reflected back into the source.
    Reflection,
}

/// Normalized coordinate of pixel centre `i` on an axis of length `n`.
pub fn pixel_to_normalized(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

fn base_grid(h: usize, w: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let mut v = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        let gy = pixel_to_normalized(y, h);
        for x in 0..w {
            v.extend_from_slice(&[pixel_to_normalized(x, w), gy, 1.0]);
        }
    }
    Ok(Tensor::from_vec(v, (h * w, 3), device)?.to_dtype(dtype)?)
}

fn reflect(coord: &Tensor, n: usize) -> Result<Tensor> {
    // reflect about the outer pixel edges at -0.5 and n - 0.5
    let span = n as f64;
    let shifted = (coord + 0.5)?.abs()?;
    let flips = (shifted.detach() / span)?.floor()?;
    let extra = (&shifted - (&flips * span)?)?;
    let parity = (&flips - ((&flips / 2.0)?.floor()? * 2.0)?)?;
    let even = parity.lt(0.5)?;
    let forward = (&extra - 0.5)?;
    let backward = ((extra.neg()? + span)? - 0.5)?;
    Ok(even.where_cond(&forward, &backward)?.clamp(0.0, span - 1.0)?)
}

/// Warps `field` `(B, C, H, W)` by `theta` `(B, 2, 3)`: output pixel `p`
/// samples the source bilinearly at `theta · [p, 1]`.
pub fn apply_affine(field: &Tensor, theta: &Tensor, padding: WarpPadding) -> Result<Tensor> {
    let (b, c, h, w) = field.dims4()?;
    let dims = theta.dims();
    if dims != [b, 2, 3] {
        return Err(Error::Input(format!("theta must be ({b}, 2, 3), got {dims:?}")));
    }
    let dtype = field.dtype();
    let device = field.device();
    let theta = theta.to_dtype(dtype)?;
    let grid = base_grid(h, w, dtype, device)?.broadcast_matmul(&theta.transpose(1, 2)?)?;
    let gx = grid.narrow(2, 0, 1)?.squeeze(2)?;
    let gy = grid.narrow(2, 1, 1)?.squeeze(2)?;
    let mut ix = gx.affine(w as f64 / 2.0, (w as f64 - 1.0) / 2.0)?;
    let mut iy = gy.affine(h as f64 / 2.0, (h as f64 - 1.0) / 2.0)?;
    if padding == WarpPadding::Reflection {
        ix = reflect(&ix, w)?;
        iy = reflect(&iy, h)?;
    }
    let x0 = ix.detach().floor()?;
    let y0 = iy.detach().floor()?;
    let tx = (&ix - &x0)?;
    let ty = (&iy - &y0)?;
    let one_tx = tx.affine(-1.0, 1.0)?;
    let one_ty = ty.affine(-1.0, 1.0)?;
    let src = field.reshape((b, c, h * w))?;
    let x1 = (&x0 + 1.0)?;
    let y1 = (&y0 + 1.0)?;
    let corners = [
        (&x0, &y0, (&one_tx * &one_ty)?),
        (&x1, &y0, (&tx * &one_ty)?),
        (&x0, &y1, (&one_tx * &ty)?),
        (&x1, &y1, (&tx * &ty)?),
    ];
    let mut out: Option<Tensor> = None;
    for (xc, yc, weight) in corners {
        let valid = (xc.ge(0.0)?.to_dtype(dtype)?
            * xc.le(w as f64 - 1.0)?.to_dtype(dtype)?
            * yc.ge(0.0)?.to_dtype(dtype)?
            * yc.le(h as f64 - 1.0)?.to_dtype(dtype)?)?;
        let flat =
            ((yc.clamp(0.0, h as f64 - 1.0)? * w as f64)? + xc.clamp(0.0, w as f64 - 1.0)?)?.to_dtype(DType::U32)?;
        let index = flat.unsqueeze(1)?.broadcast_as((b, c, h * w))?.contiguous()?;
        let sampled = src.gather(&index, 2)?;
        let term = sampled.broadcast_mul(&(weight * valid)?.unsqueeze(1)?)?;
        out = Some(match out {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(out.expect("four corners").reshape((b, c, h, w))?)
}

/// `(B, 2, 3)` identity transforms.
pub fn identity_theta(b: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let v: Vec<f64> = (0..b).flat_map(|_| super::nets::IDENTITY_AFFINE).collect();
    Ok(Tensor::from_vec(v, (b, 2, 3), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn identity_warp_is_exact_on_dyadic_sizes() -> Result<()> {
        let x = Tensor::rand(0f32, 1.0, (2, 3, 8, 16), &Device::Cpu)?;
        let y = apply_affine(&x, &identity_theta(2, DType::F32, &Device::Cpu)?, WarpPadding::Zeros)?;
        let diff = (x - y)?.abs()?.max_all()?.to_scalar::<f32>()?;
        assert_eq!(diff, 0.0);
        Ok(())
    }

    #[test]
    fn reflection_keeps_everything_in_range() -> Result<()> {
        let x = Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu)?;
        // zoom out 3x: most samples land outside the source
        let theta = Tensor::new(&[[[3.0f64, 0.0, 0.2], [0.0, 3.0, -0.4]]], &Device::Cpu)?;
        let zeros = apply_affine(&x, &theta, WarpPadding::Zeros)?;
        let refl = apply_affine(&x, &theta, WarpPadding::Reflection)?;
        assert!(zeros.min_all()?.to_scalar::<f64>()? < 0.5);
        let r = refl.flatten_all()?.to_vec1::<f64>()?;
        assert!(r.iter().all(|v| (v - 1.0).abs() < 1e-12));
        Ok(())
    }

    #[test]
    fn rejects_bad_theta_shape() {
        let x = Tensor::zeros((2, 1, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let t = Tensor::zeros((2, 3, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(apply_affine(&x, &t, WarpPadding::Zeros), Err(Error::Input(_))));
    }
}
