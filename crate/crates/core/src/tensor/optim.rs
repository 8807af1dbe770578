//! Adam optimizer over leaf tensors.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> AdamConfig {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Standard Adam with bias correction. Moment buffers are keyed by the
/// position of each parameter in the slice passed to `step`, which must be
/// stable across calls.
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Adam {
        Adam { cfg, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (idx, p) in params.iter().enumerate() {
            let grad = p.grad().ok_or(Error::MissingGrad)?;
            let mut data = p.to_vec();
            for i in 0..data.len() {
                let g = grad[i];
                self.m[idx][i] = b1 * self.m[idx][i] + (1.0 - b1) * g;
                self.v[idx][i] = b2 * self.v[idx][i] + (1.0 - b2) * g * g;
                let mhat = self.m[idx][i] / bc1;
                let vhat = self.v[idx][i] / bc2;
                data[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
            p.set_data(&data);
        }
        Ok(())
    }
}

pub fn zero_grad(params: &[Tensor]) {
    for p in params {
        p.clear_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let p = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = p.scale(0.0).unwrap().sum().unwrap();
        loss.backward().unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        opt.step(std::slice::from_ref(&p)).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        let p = Tensor::param(&[1], vec![5.0]).unwrap();
        let loss = p.scale(3.0).unwrap().sum().unwrap(); // grad = 3
        loss.backward().unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        opt.step(std::slice::from_ref(&p)).unwrap();
        // bias-corrected first step is ~ -lr * sign(g)
        assert!((p.item() - (5.0 - 0.1)).abs() < 1e-5);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let p = Tensor::param(&[1], vec![-4.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..500 {
            zero_grad(std::slice::from_ref(&p));
            let diff = p.add_scalar(-3.0).unwrap();
            let loss = diff.mul(&diff).unwrap().sum().unwrap();
            loss.backward().unwrap();
            opt.step(std::slice::from_ref(&p)).unwrap();
        }
        assert!((p.item() - 3.0).abs() < 1e-2, "got {}", p.item());
    }

    #[test]
    fn missing_grad_is_an_error() {
        let p = Tensor::param(&[1], vec![0.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        assert!(matches!(opt.step(std::slice::from_ref(&p)), Err(Error::MissingGrad)));
    }
}
