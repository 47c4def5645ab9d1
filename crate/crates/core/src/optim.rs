//! AdamW with decoupled weight decay.

use alloc::format;
use alloc::vec::Vec;

use libm::{pow, sqrt};

use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T = f32> {
    pub config: AdamWConfig,
    /// Completed update count.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || grads.iter().zip(params.tensors()).any(|(g, p)| g.shape() != p.shape()) {
            return Err(Error::Input(format!("{} gradients do not match {} parameters", grads.len(), params.len())));
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - pow(c.beta2, self.step as f64);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gf = g.as_f64();
                let mf = c.beta1 * m.as_f64() + (1.0 - c.beta1) * gf;
                let vf = c.beta2 * v.as_f64() + (1.0 - c.beta2) * gf * gf;
                *m = T::of(mf);
                *v = T::of(vf);
                let pf = p.as_f64();
                *p = T::of(pf - c.lr * ((mf / bc1) / (sqrt(vf / bc2) + c.eps) + c.weight_decay * pf));
            }
        }
        Ok(())
    }
}
