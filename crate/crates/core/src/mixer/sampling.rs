use ndarray::Array2;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::saliency::bilinear_resize;

/// Mixing weights on the probability simplex, one per input.
#[derive(Debug, Clone, PartialEq)]
pub struct MixCoefficients(Vec<f64>);

impl MixCoefficients {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Param("need at least two mixing coefficients".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Param(format!(
                "coefficients must be non-negative, got {values:?}"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Param(format!("coefficients sum to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }
}

/// Symmetric Dirichlet(alpha, ..., alpha) draw; for `k = 2` this is
/// `(lambda, 1 - lambda)` with `lambda ~ Beta(alpha, alpha)`.
pub fn sample_coefficients(alpha: f64, k: usize, rng: &mut Rng) -> Result<MixCoefficients> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Param(format!("alpha must be positive, got {alpha}")));
    }
    if k < 2 {
        return Err(Error::Param(format!("k must be at least 2, got {k}")));
    }
    // Normalized gammas lose all mass to underflow for tiny alpha; fall back
    // to stick-breaking with Beta marginals there.
    if alpha >= 0.1 {
        let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Param(e.to_string()))?;
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            let mut lambdas: Vec<f64> = draws.iter().map(|g| g / total).collect();
            let head: f64 = lambdas[..k - 1].iter().sum();
            lambdas[k - 1] = (1.0 - head).max(0.0);
            return MixCoefficients::new(lambdas);
        }
    }
    let mut remaining = 1.0;
    let mut lambdas = Vec::with_capacity(k);
    for i in 0..k - 1 {
        let rest = alpha * (k - 1 - i) as f64;
        let beta = Beta::new(alpha, rest).map_err(|e| Error::Param(e.to_string()))?;
        let v = remaining * beta.sample(rng);
        lambdas.push(v);
        remaining -= v;
    }
    lambdas.push(remaining.max(0.0));
    MixCoefficients::new(lambdas)
}

/// Spatial noise channel for the transform predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField {
    values: Array2<f64>,
}

impl NoiseField {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Upsamples a low-resolution grid to `(height, width)`.
    pub fn from_grid(grid: &Array2<f64>, height: usize, width: usize) -> Result<Self> {
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("noise grid is not finite".into()));
        }
        Ok(Self {
            values: bilinear_resize(grid, height, width),
        })
    }
}

pub const DEFAULT_NOISE_GRID: (usize, usize) = (4, 4);

/// Standard-normal grid of `grid` cells, bilinearly upsampled to `(height, width)`.
pub fn sample_noise(rng: &mut Rng, (height, width): (usize, usize), grid: (usize, usize)) -> NoiseField {
    let low = Array2::from_shape_simple_fn(grid, || StandardNormal.sample(rng));
    NoiseField {
        values: bilinear_resize(&low, height, width),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    #[test]
    fn coefficients_lie_on_simplex() {
        let mut rng = SeedStreams::new(0).stream("coeffs");
        for &alpha in &[0.01, 0.05, 0.2, 1.0, 4.0] {
            for k in 2..5 {
                let c = sample_coefficients(alpha, k, &mut rng).unwrap();
                let s: f64 = c.as_slice().iter().sum();
                assert!((s - 1.0).abs() <= 1e-9);
                assert!(c.as_slice().iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let mut rng = SeedStreams::new(0).stream("coeffs");
        assert!(matches!(sample_coefficients(0.0, 2, &mut rng), Err(Error::Param(_))));
        assert!(matches!(sample_coefficients(-1.0, 2, &mut rng), Err(Error::Param(_))));
        assert!(matches!(sample_coefficients(1.0, 1, &mut rng), Err(Error::Param(_))));
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let a = sample_noise(&mut SeedStreams::new(5).stream("noise"), (16, 16), DEFAULT_NOISE_GRID);
        let b = sample_noise(&mut SeedStreams::new(5).stream("noise"), (16, 16), DEFAULT_NOISE_GRID);
        let bytes = |n: &NoiseField| n.values().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
        assert_eq!(bytes(&a), bytes(&b));
    }

    #[test]
    fn constant_grid_upsamples_to_constant() {
        let f = NoiseField::from_grid(&Array2::from_elem((4, 4), -1.25), 32, 24).unwrap();
        assert!(f.values().iter().all(|&v| v == -1.25));
    }
}
