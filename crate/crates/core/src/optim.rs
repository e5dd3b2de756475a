//! Adam and plain SGD over named parameters.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Param, ParamGroup};
use crate::math::{self, Float};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer {other:?} (expected adam or sgd)"))),
        }
    }
}

/// Optimizer hyperparameters plus per-parameter moment buffers, keyed by
/// parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: Float,
    pub beta1: Float,
    pub beta2: Float,
    pub eps: Float,
    step: u64,
    moments: BTreeMap<String, (Vec<Float>, Vec<Float>)>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: Float) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        Ok(OptimizerState {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn adam(lr: Float) -> Result<Self> {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn sgd(lr: Float) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Update every parameter that carries a gradient. Running variances
    /// stay non-negative when they are optimized directly.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Param>,
    {
        self.step += 1;
        let t = self.step as Float;
        let c1 = 1.0 - math::pow(self.beta1, t);
        let c2 = 1.0 - math::pow(self.beta2, t);
        for p in params {
            let Some(grad) = p.value.grad().map(<[Float]>::to_vec) else {
                continue;
            };
            if grad.len() != p.value.numel() {
                return Err(Error::contract("optimizer_step", format!("gradient size mismatch for {}", p.name)));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.value.data_mut().iter_mut().zip(&grad) {
                        *w -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = self
                        .moments
                        .entry(p.name.clone())
                        .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                    let data = p.value.data_mut();
                    for i in 0..grad.len() {
                        let g = grad[i];
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        data[i] -= self.lr * m_hat / (math::sqrt(v_hat) + self.eps);
                    }
                }
            }
            if p.group == ParamGroup::BnSigma2 {
                p.value.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(())
    }
}
