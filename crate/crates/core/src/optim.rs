//! Adam without weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimiser state for an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new<'a>(cfg: AdamConfig, shapes: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = shapes
            .into_iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            cfg,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// Apply one update. `params` and `grads` must follow the construction order.
    pub fn update<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Tensor]) -> Result<()> {
        ensure!(
            grads.len() == self.m.len(),
            Shape,
            "optimizer tracks {} tensors, got {} gradients",
            self.m.len(),
            grads.len()
        );
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut count = 0;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ensure!(
                p.shape() == g.shape() && g.shape() == m.shape(),
                Shape,
                "gradient shape {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            );
            let (pd, gd) = (p.data_mut(), g.data());
            for i in 0..gd.len() {
                let mi = &mut m.data_mut()[i];
                *mi = beta1 * *mi + (1.0 - beta1) * gd[i];
                let mhat = *mi / bc1;
                let vi = &mut v.data_mut()[i];
                *vi = beta2 * *vi + (1.0 - beta2) * gd[i] * gd[i];
                let vhat = *vi / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            count += 1;
        }
        ensure!(count == grads.len(), Shape, "optimizer got {count} parameters for {} gradients", grads.len());
        Ok(())
    }

    /// Round moment estimates to `f32` so a checkpoint round trip is exact.
    pub fn round_to_f32(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            for x in t.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = vec![Tensor::from_vec(1, 2, vec![1.0, -1.0])];
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &p);
        let g = vec![Tensor::from_vec(1, 2, vec![3.0, -0.5])];
        opt.update(p.iter_mut(), &g).unwrap();
        assert!((p[0].get(0, 0) - 0.9).abs() < 1e-6);
        assert!((p[0].get(0, 1) + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = vec![Tensor::scalar(5.0)];
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &p);
        for _ in 0..500 {
            let g = vec![p[0].scale(2.0)];
            opt.update(p.iter_mut(), &g).unwrap();
        }
        assert!(p[0].get(0, 0).abs() < 1e-2);
    }

    #[test]
    fn rejects_mismatched_lists() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &p);
        assert!(opt.update(p.iter_mut(), &[]).is_err());
    }
}
