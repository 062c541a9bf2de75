//! Inference-time fusion of expert logits.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// `sigmoid(sum w_i z_i)`.
    #[default]
    Logit,
    /// `sum w_i sigmoid(z_i)`.
    Saliency,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(Self::Logit),
            "saliency" => Ok(Self::Saliency),
            other => Err(Error::InvalidArgument(format!("fusion mode must be logit or saliency, got {other:?}"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Logit => "logit",
            Self::Saliency => "saliency",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// One non-negative weight per expert, summing to one.
    pub weights: Vec<f64>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { mode: FusionMode::Logit, weights: vec![0.5, 0.5] }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "fusion weights must be non-negative and finite, got {:?}",
                self.weights
            )));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("fusion weights must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Parses `"w1,w2,..."`.
pub fn parse_weights(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad weight {p:?}"))))
        .collect()
}

/// Fuses per-expert logit volumes into one saliency volume in `(0, 1)`.
///
/// Two experts are combined as an interpolation anchored on the heavier one,
/// so equal inputs and degenerate weights reproduce an expert exactly; the result is
/// clamped to the per-pixel hull of the expert saliencies.
pub fn fuse_many<T: Scalar>(logits: &[&Tensor<T>], cfg: &FusionConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    if logits.len() != cfg.weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logit volumes but {} weights",
            logits.len(),
            cfg.weights.len()
        )));
    }
    let shape = logits[0].shape();
    if let Some(bad) = logits.iter().find(|z| z.shape() != shape) {
        return Err(Error::Shape(format!("cannot fuse {shape:?} with {:?}", bad.shape())));
    }
    let w: Vec<T> = cfg.weights.iter().map(|&v| T::lit(v)).collect();
    let combine = |vals: &[T]| -> T {
        if vals.len() == 2 {
            // anchor on the heavier expert so weights (1,0) and (0,1) are exact
            if w[0] >= w[1] {
                vals[0] + w[1] * (vals[1] - vals[0])
            } else {
                vals[1] + w[0] * (vals[0] - vals[1])
            }
        } else {
            vals.iter().zip(&w).map(|(&v, &wi)| wi * v).sum()
        }
    };
    let mut vals = vec![T::zero(); logits.len()];
    let data = (0..logits[0].numel())
        .map(|i| {
            for (v, z) in vals.iter_mut().zip(logits) {
                *v = z.data()[i];
            }
            if cfg.mode == FusionMode::Saliency {
                vals.iter_mut().for_each(|v| *v = v.sigmoid());
            }
            let lo = vals.iter().copied().fold(T::infinity(), T::min);
            let hi = vals.iter().copied().fold(T::neg_infinity(), T::max);
            let fused = combine(&vals).max(lo).min(hi);
            match cfg.mode {
                FusionMode::Logit => fused.sigmoid(),
                FusionMode::Saliency => fused,
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn fuse<T: Scalar>(z1: &Tensor<T>, z2: &Tensor<T>, cfg: &FusionConfig) -> Result<Tensor<T>> {
    fuse_many(&[z1, z2], cfg)
}
