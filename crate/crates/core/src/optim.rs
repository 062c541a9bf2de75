//! AdamW with per-group learning rates and global-norm gradient clipping.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm above which gradients are rescaled; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: Some(1.0) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    lr: HashMap<ParamGroup, f64>,
    moments: HashMap<ParamId, (Vec<T>, Vec<T>)>,
    steps: u64,
}

impl<T: Scalar> AdamW<T> {
    /// `lr` maps each trainable group to its learning rate.
    pub fn new(cfg: AdamWConfig, lr: &[(ParamGroup, f64)]) -> Result<Self> {
        if lr.iter().any(|&(_, r)| !(r.is_finite() && r > 0.0)) {
            return Err(Error::InvalidArgument(format!("learning rates must be positive, got {lr:?}")));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(Error::InvalidArgument("betas must lie in [0, 1)".into()));
        }
        Ok(Self { cfg, lr: lr.iter().copied().collect(), moments: HashMap::new(), steps: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn lr(&self, group: ParamGroup) -> Option<f64> {
        self.lr.get(&group).copied()
    }

    /// Applies one update. Gradients of frozen parameters are an error, as
    /// is a trainable group without a learning rate.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<StepStats> {
        let mut sq = 0.0f64;
        for (id, g) in grads {
            let p = store.get(*id);
            if !p.trainable {
                return Err(Error::State(format!("gradient for frozen parameter {:?}", p.name)));
            }
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} does not match parameter {:?} {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            sq += g.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>();
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { step: self.steps as usize, detail: "gradient norm is not finite".into() });
        }
        let clip = match self.cfg.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = T::lit(1.0 - b1.powi(t));
        let bc2 = T::lit(1.0 - b2.powi(t));
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let eps = T::lit(self.cfg.eps);
        let clip_t = T::lit(clip);
        for (id, g) in grads {
            let group = store.get(*id).group;
            let lr = *self
                .lr
                .get(&group)
                .ok_or_else(|| Error::State(format!("no learning rate for trainable group {}", group.as_str())))?;
            let (lr_t, decay) = (T::lit(lr), T::lit(1.0 - lr * self.cfg.weight_decay));
            let n = g.numel();
            let (m, v) = self.moments.entry(*id).or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let value = store.value_mut(*id).data_mut();
            for i in 0..n {
                let gi = g.data()[i] * clip_t;
                m[i] = b1t * m[i] + one_b1 * gi;
                v[i] = b2t * v[i] + one_b2 * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] = value[i] * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(StepStats { grad_norm, clipped: clip < 1.0 })
    }
}

/// Elementwise mean of per-sample gradient lists.
pub fn average_grads<T: Scalar>(per_sample: Vec<Vec<(ParamId, Tensor<T>)>>) -> Vec<(ParamId, Tensor<T>)> {
    let n = per_sample.len();
    let mut acc: Vec<(ParamId, Tensor<T>)> = Vec::new();
    for grads in per_sample {
        for (id, g) in grads {
            match acc.binary_search_by_key(&id, |(i, _)| *i) {
                Ok(pos) => acc[pos].1.add_assign(&g),
                Err(pos) => acc.insert(pos, (id, g)),
            }
        }
    }
    if n > 1 {
        let inv = T::one() / T::from_usize_lossy(n);
        for (_, g) in &mut acc {
            g.scale_inplace(inv);
        }
    }
    acc
}
