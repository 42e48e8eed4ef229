//! Finite-difference verification of analytic gradients.

use candle_core::{DType, Tensor, Var};
use rand::seq::index::sample;

use crate::error::Result;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Gradients smaller than this are compared against it instead of
    /// their own magnitude, which bounds the effect of round-off.
    pub scale_floor: f64,
    /// Check at most this many entries per tensor (all when `None`).
    pub max_per_tensor: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            scale_floor: 1e-4,
            max_per_tensor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Entries matched only by a one-sided or smaller-step stencil, i.e.
    /// whose central stencil straddled a non-differentiable point.
    pub one_sided: usize,
    pub worst: Option<GradMismatch>,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn worst_relative_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.relative_error)
    }
}

fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares the gradient of `loss` with respect to every entry of `vars`
/// against finite differences.
///
/// The primary estimate is the central difference, refined by the
/// fourth-order central stencil when it misses. Networks with
/// ReLU, max pooling or bilinear sampling are only piecewise smooth, and a
/// stencil that straddles a kink is biased; such entries are compared with
/// the one-sided stencils and with a five times smaller step, and the
/// closest estimate counts. A wrong gradient disagrees with all of them.
pub fn check_gradients(
    vars: &[(String, Var)],
    loss: impl Fn() -> Result<Tensor>,
    cfg: &GradCheckConfig,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let eval = || -> Result<f64> { Ok(loss()?.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let grads = loss()?.backward()?;
    let f0 = eval()?;
    let h = cfg.step;
    let mut report = GradCheckReport::default();
    for (name, var) in vars {
        let shape = var.shape().clone();
        let dtype = var.dtype();
        let device = var.device().clone();
        let base = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let analytic = match grads.get(var) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?,
            None => vec![0.0; base.len()],
        };
        let indices: Vec<usize> = match cfg.max_per_tensor {
            Some(m) if m < base.len() => {
                let mut picked = sample(rng, base.len(), m).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..base.len()).collect(),
        };
        let mut values = base.clone();
        for i in indices {
            let a = analytic[i];
            let mut set = |d: f64| -> Result<f64> {
                values[i] = base[i] + d;
                var.set(&Tensor::from_vec(values.clone(), &shape, &device)?.to_dtype(dtype)?)?;
                eval()
            };
            let mut best: Option<(f64, f64)> = None;
            let mut fallback = false;
            for (round, step) in [h, h / 5.0].into_iter().enumerate() {
                let (p1, m1) = (set(step)?, set(-step)?);
                if round == 0 {
                    let n = (p1 - m1) / (2.0 * step);
                    let err = relative_error(a, n, cfg.scale_floor);
                    best = Some((n, err));
                    if err <= cfg.tolerance {
                        break;
                    }
                }
                let (p2, m2) = (set(2.0 * step)?, set(-2.0 * step)?);
                let estimates = [
                    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step),
                    (-3.0 * f0 + 4.0 * p1 - p2) / (2.0 * step),
                    (3.0 * f0 - 4.0 * m1 + m2) / (2.0 * step),
                ];
                for (k, n) in estimates.into_iter().enumerate() {
                    let err = relative_error(a, n, cfg.scale_floor);
                    if best.is_none_or(|(_, e)| err < e) {
                        best = Some((n, err));
                        fallback = round > 0 || k > 0;
                    }
                }
                if best.is_some_and(|(_, e)| e <= cfg.tolerance) {
                    break;
                }
            }
            set(0.0)?;
            let (numeric, err) = best.unwrap_or((f64::NAN, f64::INFINITY));
            if fallback && err <= cfg.tolerance {
                report.one_sided += 1;
            }
            report.checked += 1;
            let entry = GradMismatch {
                name: name.clone(),
                index: i,
                analytic: a,
                numeric,
                relative_error: err,
            };
            if err > cfg.tolerance {
                report.failures.push(entry.clone());
            }
            if report.worst.as_ref().is_none_or(|w| err > w.relative_error) {
                report.worst = Some(entry);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;
    use candle_core::Device;

    #[test]
    fn smooth_function_passes() {
        let x = Var::from_vec(vec![0.3f64, -1.2, 2.0], 3, &Device::Cpu).unwrap();
        let vars = vec![("x".to_string(), x.clone())];
        let loss = || Ok((x.as_tensor().sqr()?.sin()?.sum_all()? * 0.5)?);
        let mut rng = SeedStreams::new(0).stream("gc");
        let r = check_gradients(&vars, loss, &GradCheckConfig::default(), &mut rng).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Var::from_vec(vec![0.3f64, -1.2], 2, &Device::Cpu).unwrap();
        let vars = vec![("x".to_string(), x.clone())];
        // detach hides half of the dependence from backprop
        let loss = || Ok((x.as_tensor().sqr()?.sum_all()? + x.as_tensor().detach().sqr()?.sum_all()?)?);
        let mut rng = SeedStreams::new(0).stream("gc");
        let r = check_gradients(&vars, loss, &GradCheckConfig::default(), &mut rng).unwrap();
        assert_eq!(r.failures.len(), 2);
    }

    #[test]
    fn kink_uses_smooth_side() {
        // |x| near 0: the central stencil straddles the kink
        let x = Var::from_vec(vec![4e-6f64], 1, &Device::Cpu).unwrap();
        let vars = vec![("x".to_string(), x.clone())];
        let loss = || Ok(x.as_tensor().abs()?.sum_all()?);
        let mut rng = SeedStreams::new(0).stream("gc");
        let r = check_gradients(&vars, loss, &GradCheckConfig::default(), &mut rng).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.one_sided, 1);
    }
}
