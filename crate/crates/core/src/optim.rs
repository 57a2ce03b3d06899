//! AdamW with decoupled weight decay and a per-epoch cosine schedule.

use std::f64::consts::PI;

use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(usize),
    #[error("parameter {index}: gradient shape {grad:?} does not match {param:?}")]
    ShapeMismatch {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("expected {expected} gradients, got {got}")]
    Count { expected: usize, got: usize },
    #[error("epoch {epoch} outside schedule of {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr_base: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_base: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates and step count, one entry per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimState,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            state: OptimState::new(params),
        }
    }

    /// One update at learning rate `lr`:
    /// `p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p`.
    ///
    /// Gradients are validated before anything is modified.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        lr: f64,
    ) -> Result<(), OptimError> {
        if grads.len() != params.len() || self.state.m.len() != params.len() {
            return Err(OptimError::Count {
                expected: params.len(),
                got: grads.len(),
            });
        }
        for (index, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(OptimError::ShapeMismatch {
                    index,
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(OptimError::NonFiniteGradient(index));
            }
        }

        let AdamWConfig {
            weight_decay,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);

        for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.state.m[idx].data_mut();
            let v = self.state.v[idx].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / correction1;
                let v_hat = *vi / correction2;
                *w = *w - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * weight_decay * *w;
            }
        }
        Ok(())
    }
}

/// `0.5 * lr_base * (1 + cos(pi * epoch / total))` for `0 <= epoch < total`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_base: f64) -> Result<f64, OptimError> {
    if epoch >= total_epochs {
        return Err(OptimError::EpochOutOfRange {
            epoch,
            total: total_epochs,
        });
    }
    Ok(0.5 * lr_base * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos()))
}
