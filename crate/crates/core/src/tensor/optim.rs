use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a fixed, ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One bias-corrected Adam update using each parameter's `grad`.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::invalid(
                "adam_step",
                format!("state tracks {} parameters, got {}", self.m.len(), params.len()),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            match &p.grad {
                None => return Err(Error::MissingGrad(i)),
                Some(g) if g.len() != p.numel() || self.m[i].len() != p.numel() => {
                    return Err(Error::shape("adam_step", p.shape(), &[g.len()]));
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.take().expect("validated above");
            for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.grad = Some(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(value: f64, grad: f64) -> Tensor {
        let mut t = Tensor::new(vec![1], vec![value]).unwrap();
        t.grad = Some(vec![grad]);
        t
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = vec![scalar_param(0.0, 1.0)];
        let mut adam = AdamState::new(
            &params,
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
        );
        adam.step(&mut params).unwrap();
        // m_hat = 1, v_hat = 1: update is lr / (1 + eps)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((params[0].data()[0] - expected).abs() < 1e-15);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_grad_leaves_param() {
        let mut params = vec![scalar_param(0.7, 0.0)];
        let mut adam = AdamState::new(&params, AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut params).unwrap();
        }
        assert_eq!(params[0].data()[0], 0.7);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut params = vec![Tensor::zeros(vec![3])];
        let mut adam = AdamState::new(&params, AdamConfig::default());
        assert!(matches!(adam.step(&mut params), Err(Error::MissingGrad(0))));
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn identical_optimizers_agree_bitwise() {
        let run = || {
            let mut params = vec![scalar_param(0.3, 0.0), scalar_param(-1.2, 0.0)];
            let mut adam = AdamState::new(&params, AdamConfig::default());
            for k in 0..50 {
                params[0].grad = Some(vec![(k as f64 * 0.37).sin()]);
                params[1].grad = Some(vec![(k as f64 * 0.11).cos()]);
                adam.step(&mut params).unwrap();
            }
            params.iter().map(|p| p.data()[0].to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
