//! SGD with momentum and weight decay.
//!
//! Update order is fixed: decay folds into the gradient before momentum,
//!
//! ```text
//! v <- mu * v + (g + wd * theta)
//! theta <- theta - lr * v
//! ```

use super::tensor::Tensor;
use crate::error::{CamlError, Result};

#[derive(Clone, Copy, Debug)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// One parameter-group optimizer; velocity buffers are allocated per
/// parameter at construction and never resized.
pub struct Sgd {
    cfg: SgdConfig,
    params: Vec<Tensor>,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, params: Vec<Tensor>) -> Sgd {
        assert!(cfg.lr > 0.0, "learning rate must be positive");
        let velocity = params.iter().map(|p| vec![0.0f32; p.numel()]).collect();
        Sgd {
            cfg,
            params,
            velocity,
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn step(&mut self) -> Result<()> {
        for (p, v) in self.params.iter().zip(self.velocity.iter_mut()) {
            let mut d = p.data_mut();
            let (value, grad) = d.split_value_grad();
            sgd_step(value, grad, v, &self.cfg)?;
        }
        Ok(())
    }
}

/// The raw update on flat buffers; exposed for direct testing.
pub fn sgd_step(theta: &mut [f32], grad: &[f32], velocity: &mut [f32], cfg: &SgdConfig) -> Result<()> {
    if theta.len() != grad.len() || theta.len() != velocity.len() {
        return Err(CamlError::Shape(format!(
            "sgd_step length mismatch: theta {}, grad {}, velocity {}",
            theta.len(),
            grad.len(),
            velocity.len()
        )));
    }
    for i in 0..theta.len() {
        let eff = grad[i] + cfg.weight_decay * theta[i];
        velocity[i] = cfg.momentum * velocity[i] + eff;
        theta[i] -= cfg.lr * velocity[i];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step_without_momentum_or_decay() {
        let mut theta = vec![1.0f32];
        let grad = vec![1.0f32];
        let mut vel = vec![0.0f32];
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_step(&mut theta, &grad, &mut vel, &cfg).unwrap();
        assert!((theta[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let mut theta = vec![0.0f32];
        let grad = vec![1.0f32];
        let mut vel = vec![0.0f32];
        let cfg = SgdConfig {
            lr: 1.0,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        sgd_step(&mut theta, &grad, &mut vel, &cfg).unwrap();
        assert!((theta[0] + 1.0).abs() < 1e-7);
        sgd_step(&mut theta, &grad, &mut vel, &cfg).unwrap();
        assert!((theta[0] + 2.9).abs() < 1e-6, "theta after step2 = {}", theta[0]);
    }

    #[test]
    fn decay_only_step() {
        let mut theta = vec![1.0f32];
        let grad = vec![0.0f32];
        let mut vel = vec![0.0f32];
        let cfg = SgdConfig {
            lr: 1.0,
            momentum: 0.0,
            weight_decay: 0.1,
        };
        sgd_step(&mut theta, &grad, &mut vel, &cfg).unwrap();
        assert!((theta[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut theta = vec![0.0f32; 2];
        let grad = vec![0.0f32; 3];
        let mut vel = vec![0.0f32; 2];
        assert!(sgd_step(&mut theta, &grad, &mut vel, &SgdConfig::default()).is_err());
    }

    #[test]
    fn optimizer_steps_its_parameters() {
        let p = Tensor::from_vec(&[2], vec![1.0, -1.0]).with_grad();
        {
            let mut d = p.data_mut();
            d.grad[0] = 0.5;
            d.grad[1] = -0.5;
        }
        let mut opt = Sgd::new(
            SgdConfig {
                lr: 0.1,
                momentum: 0.0,
                weight_decay: 0.0,
            },
            vec![p.clone()],
        );
        opt.step().unwrap();
        let v = p.value();
        assert!((v[0] - 0.95).abs() < 1e-7);
        assert!((v[1] + 0.95).abs() < 1e-7);
        opt.zero_grad();
        assert_eq!(p.grad(), vec![0.0, 0.0]);
    }
}
