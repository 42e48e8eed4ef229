use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Stochastic gradient descent with coupled L2 weight decay and heavy-ball
/// momentum, update order identical to `torch.optim.SGD`.
pub struct Sgd {
    cfg: SgdConfig,
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, cfg: SgdConfig) -> Self {
        let velocity = vec![None; vars.len()];
        Self { cfg, vars, velocity }
    }

    pub fn config(&self) -> SgdConfig {
        self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Applies one update. Variables without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(grad) = grads.get(var) else { continue };
            let w = var.as_detached_tensor();
            let mut g = grad.detach();
            if self.cfg.weight_decay != 0.0 {
                g = (g + (&w * self.cfg.weight_decay)?)?;
            }
            if self.cfg.momentum != 0.0 {
                let v = match vel.take() {
                    Some(prev) => ((prev * self.cfg.momentum)? + &g)?,
                    None => g,
                };
                g = v.clone();
                *vel = Some(v);
            }
            var.set(&(w - (g * self.cfg.lr)?)?)?;
        }
        Ok(())
    }
}

/// Euclidean norm of the gradients of `vars` (missing gradients count as zero).
pub fn grad_norm(grads: &GradStore, vars: &[&Var]) -> Result<f64> {
    let mut total = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v) {
            total += g
                .sqr()?
                .sum_all()?
                .to_dtype(candle_core::DType::F64)?
                .to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn matches_hand_computed_momentum_updates() -> Result<()> {
        let v = Var::new(&[1.0f64, -2.0], &Device::Cpu)?;
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
        };
        let mut opt = Sgd::new(vec![v.clone()], cfg);
        for _ in 0..2 {
            // loss = sum(w^2) / 2, gradient = w
            let loss = (v.as_tensor().sqr()?.sum_all()? * 0.5)?;
            opt.step(&loss.backward()?)?;
        }
        // step 1: g = 1.01 w0, buf = g, w1 = w0 - 0.1 g = 0.899 w0
        // step 2: g = 1.01 w1, buf = 0.9*1.01 w0 + 1.01 w1, w2 = w1 - 0.1 buf
        let w0 = 1.0;
        let w1 = w0 * (1.0 - 0.101);
        let buf = 0.9 * 1.01 * w0 + 1.01 * w1;
        let w2 = w1 - 0.1 * buf;
        let got = v.as_tensor().to_vec1::<f64>()?;
        assert!((got[0] - w2).abs() < 1e-12);
        assert!((got[1] + 2.0 * w2).abs() < 1e-12);
        Ok(())
    }
}
