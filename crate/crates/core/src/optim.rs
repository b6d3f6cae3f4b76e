//! Per-parameter adaptive optimisers.
//!
//! [`Ranger`] is rectified Adam wrapped in lookahead averaging: the fast
//! weights take RAdam steps and every `k` steps the slow copy moves by
//! `alpha` toward them, after which the fast weights restart from the slow copy.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Ranger,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    /// RAdam switches to the adaptive step once the SMA length exceeds this.
    pub sma_threshold: f64,
}

impl OptimizerConfig {
    pub fn ranger(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Ranger,
            lr,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-5,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
            sma_threshold: 5.0,
        }
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { kind: OptimizerKind::Adam, lr, beta1, beta2, eps: 1e-8, lookahead_k: 0, lookahead_alpha: 0.0, sma_threshold: 0.0 }
    }
}

/// Optimiser state for one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    slow: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let slow = match config.kind {
            OptimizerKind::Ranger => params.tensors().to_vec(),
            OptimizerKind::Adam => Vec::new(),
        };
        Self { config, step: 0, m: zeros.clone(), v: zeros, slow }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter '{}'", params.names()[bad])));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(c.beta1, t);
        let bc2 = 1.0 - libm::pow(c.beta2, t);
        // rectification term; `None` means fall back to the un-normalised momentum step
        let rect = match c.kind {
            OptimizerKind::Adam => Some(1.0),
            OptimizerKind::Ranger => {
                let rho_inf = 2.0 / (1.0 - c.beta2) - 1.0;
                let rho_t = rho_inf - 2.0 * t * libm::pow(c.beta2, t) / bc2;
                if rho_t > c.sma_threshold {
                    Some(math::sqrt(
                        (rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t),
                    ))
                } else {
                    None
                }
            }
        };
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((pj, gj), (mj, vj)) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
                *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
                let mhat = *mj / bc1;
                *pj -= match rect {
                    Some(r) => c.lr * r * mhat / (math::sqrt(*vj / bc2) + c.eps),
                    None => c.lr * mhat,
                };
            }
        }
        if c.kind == OptimizerKind::Ranger && c.lookahead_k > 0 && self.step % c.lookahead_k as u64 == 0 {
            for (p, s) in params.tensors_mut().iter_mut().zip(self.slow.iter_mut()) {
                for (pj, sj) in p.data_mut().iter_mut().zip(s.data_mut()) {
                    *sj += c.lookahead_alpha * (*pj - *sj);
                    *pj = *sj;
                }
            }
        }
        Ok(())
    }

    /// Named state arrays for checkpointing (`m.*`, `v.*`, `slow.*`).
    pub fn state(&self, params: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        out.add("step", Tensor::scalar(self.step as f64));
        for (i, name) in params.names().iter().enumerate() {
            out.add(&format!("m.{name}"), self.m[i].clone());
            out.add(&format!("v.{name}"), self.v[i].clone());
            if !self.slow.is_empty() {
                out.add(&format!("slow.{name}"), self.slow[i].clone());
            }
        }
        out
    }

    pub fn load_state(&mut self, params: &ParamStore, state: &ParamStore) -> Result<()> {
        let get = |key: &str| {
            state
                .find(key)
                .map(|id| state.get(id).clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer entry '{key}'")))
        };
        self.step = get("step")?.data()[0] as u64;
        for (i, name) in params.names().iter().enumerate() {
            self.m[i] = get(&format!("m.{name}"))?;
            self.v[i] = get(&format!("v.{name}"))?;
            if !self.slow.is_empty() {
                self.slow[i] = get(&format!("slow.{name}"))?;
            }
        }
        Ok(())
    }
}
