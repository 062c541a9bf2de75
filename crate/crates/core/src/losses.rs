//! Saliency training losses and the weighted composite objective.
//!
//! Every loss is evaluated per frame on `(H, W)` maps and averaged over
//! frames. From logits `z` the prediction is `s = sigmoid(z)` for BCE and
//! `p = s / sum(s)` for the distribution losses (KL, CC, SIM). Each kernel
//! returns its value together with the analytic gradient so the decoder
//! graph can be seeded directly.

use serde::{Deserialize, Serialize};

use crate::data::SaliencyTarget;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guard for logs and denominators.
pub const EPS: f64 = 1e-8;

/// Tolerance on `sum(p) = 1` for the distribution losses.
const SUM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub kl: f64,
    pub cc: f64,
    pub sim: f64,
    pub bce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { kl: 10.0, cc: 2.0, sim: 1.0, bce: 1.0 }
    }
}

/// Named loss components of one prediction head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub cc: f64,
    pub sim: f64,
    pub bce: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_components(kl: f64, cc: f64, sim: f64, bce: f64, w: &LossWeights) -> Self {
        Self { kl, cc, sim, bce, total: w.kl * kl + w.cc * cc + w.sim * sim + w.bce * bce }
    }

    pub fn zero() -> Self {
        Self { kl: 0.0, cc: 0.0, sim: 0.0, bce: 0.0, total: 0.0 }
    }
}

/// What the pixel-wise BCE term is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BceTarget {
    /// Per-frame density min-max scaled to `[0, 1]`.
    #[default]
    ScaledDensity,
    /// Binary fixation map.
    Fixations,
}

/// Ground truth prepared for the loss kernels at one resolution.
#[derive(Debug, Clone)]
pub struct LossTarget<T> {
    /// `(T, H, W)`, each frame a distribution.
    pub density: Tensor<T>,
    /// `(T, H, W)` in `[0, 1]`.
    pub bce: Tensor<T>,
    fixations: Vec<u8>,
    mode: BceTarget,
}

impl<T: Scalar> LossTarget<T> {
    pub fn new(target: &SaliencyTarget, mode: BceTarget) -> Self {
        Self::build(target.density.cast(), target.fixations.clone(), mode)
    }

    fn build(density: Tensor<T>, fixations: Vec<u8>, mode: BceTarget) -> Self {
        let s = density.shape();
        let plane = s[1] * s[2];
        let bce = match mode {
            BceTarget::ScaledDensity => {
                let mut data = Vec::with_capacity(density.numel());
                for frame in density.data().chunks(plane) {
                    data.extend(min_max_scale(frame));
                }
                Tensor::from_vec(s, data).expect("same shape")
            }
            BceTarget::Fixations => {
                Tensor::from_vec(s, fixations.iter().map(|&f| T::from_usize_lossy(f as usize)).collect())
                    .expect("same shape")
            }
        };
        Self { density, bce, fixations, mode }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.density.shape();
        (s[0], s[1], s[2])
    }

    /// Target at a coarser `(h, w)`: density area-averaged then renormalized,
    /// fixations max-pooled.
    pub fn downsample(&self, h: usize, w: usize) -> Result<Self> {
        let (t, big_h, big_w) = self.dims();
        if h == 0 || w == 0 || big_h % h != 0 || big_w % w != 0 {
            return Err(Error::Shape(format!("target {big_h}x{big_w} not divisible into {h}x{w}")));
        }
        if (h, w) == (big_h, big_w) {
            return Ok(self.clone());
        }
        let (fy, fx) = (big_h / h, big_w / w);
        let mut dens = vec![T::zero(); t * h * w];
        let mut fix = vec![0u8; t * h * w];
        for ti in 0..t {
            let src = self.density.slice_outer(ti);
            let fsrc = &self.fixations[ti * big_h * big_w..(ti + 1) * big_h * big_w];
            for y in 0..big_h {
                for x in 0..big_w {
                    let o = ti * h * w + (y / fy) * w + x / fx;
                    dens[o] += src[y * big_w + x];
                    fix[o] = fix[o].max(fsrc[y * big_w + x]);
                }
            }
        }
        let mut data = Vec::with_capacity(dens.len());
        for frame in dens.chunks(h * w) {
            data.extend(crate::data::normalize_to_distribution(frame));
        }
        Ok(Self::build(Tensor::from_vec(&[t, h, w], data)?, fix, self.mode))
    }
}

fn min_max_scale<T: Scalar>(frame: &[T]) -> Vec<T> {
    let lo = frame.iter().copied().fold(T::infinity(), T::min);
    let hi = frame.iter().copied().fold(T::neg_infinity(), T::max);
    if hi > lo {
        frame.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![T::zero(); frame.len()]
    }
}

fn check_distribution<T: Scalar>(p: &[T]) -> Result<()> {
    let sum = p.iter().copied().sum::<T>().to_f64_lossy();
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(Error::NotNormalized { sum });
    }
    Ok(())
}

fn check_len<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "loss inputs must be equal-length and non-empty ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `KL(q || p) = sum q ln((q + eps) / (p + eps))` and its gradient in `p`.
pub fn kl_loss_grad<T: Scalar>(p: &[T], q: &[T]) -> Result<(T, Vec<T>)> {
    check_len(p, q)?;
    check_distribution(p)?;
    check_distribution(q)?;
    let eps = T::lit(EPS);
    let mut value = T::zero();
    let grad = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            value += qi * ((qi + eps) / (pi + eps)).ln();
            -qi / (pi + eps)
        })
        .collect();
    Ok((value, grad))
}

pub fn kl_loss<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    Ok(kl_loss_grad(p, q)?.0)
}

/// Pearson correlation with its gradient in `a`; zero when either side is
/// (numerically) constant.
pub(crate) fn pearson_grad<T: Scalar>(a: &[T], b: &[T]) -> (T, Vec<T>) {
    let n = T::from_usize_lossy(a.len());
    let ma = a.iter().copied().sum::<T>() / n;
    let mb = b.iter().copied().sum::<T>() / n;
    let (mut sab, mut saa, mut sbb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    let (na, nb) = (saa.sqrt(), sbb.sqrt());
    let denom = na * nb;
    if denom <= T::lit(EPS) || denom.is_nan() {
        return (T::zero(), vec![T::zero(); a.len()]);
    }
    let r = sab / denom;
    // centering drops out because the centered b sums to zero
    let grad = a.iter().zip(b).map(|(&x, &y)| (y - mb) / denom - r * (x - ma) / saa).collect();
    (r, grad)
}

pub fn pearson<T: Scalar>(a: &[T], b: &[T]) -> T {
    pearson_grad(a, b).0
}

/// `1 - Pearson(p, q)` and its gradient in `p`.
pub fn cc_loss_grad<T: Scalar>(p: &[T], q: &[T]) -> Result<(T, Vec<T>)> {
    check_len(p, q)?;
    let (r, g) = pearson_grad(p, q);
    Ok((T::one() - r, g.into_iter().map(|v| -v).collect()))
}

pub fn cc_loss<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    Ok(cc_loss_grad(p, q)?.0)
}

/// `1 - sum min(p, q)` and a subgradient in `p` (ties split evenly).
pub fn sim_loss_grad<T: Scalar>(p: &[T], q: &[T]) -> Result<(T, Vec<T>)> {
    check_len(p, q)?;
    check_distribution(p)?;
    check_distribution(q)?;
    let mut inter = T::zero();
    let grad = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            inter += pi.min(qi);
            if pi < qi {
                -T::one()
            } else if pi > qi {
                T::zero()
            } else {
                T::lit(-0.5)
            }
        })
        .collect();
    Ok((T::one() - inter, grad))
}

pub fn sim_loss<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    Ok(sim_loss_grad(p, q)?.0)
}

/// Mean pixel-wise binary cross-entropy with `s` clamped to `[eps, 1-eps]`,
/// and its gradient in `s`.
pub fn bce_loss_grad<T: Scalar>(s: &[T], y: &[T]) -> Result<(T, Vec<T>)> {
    check_len(s, y)?;
    let eps = T::lit(EPS);
    let hi = T::one() - eps;
    let inv_n = T::one() / T::from_usize_lossy(s.len());
    let mut value = T::zero();
    let grad = s
        .iter()
        .zip(y)
        .map(|(&si, &yi)| {
            let c = si.max(eps).min(hi);
            value -= yi * c.ln() + (T::one() - yi) * (T::one() - c).ln();
            if si < eps || si > hi {
                T::zero()
            } else {
                (-yi / c + (T::one() - yi) / (T::one() - c)) * inv_n
            }
        })
        .collect();
    Ok((value * inv_n, grad))
}

pub fn bce_loss<T: Scalar>(s: &[T], y: &[T]) -> Result<T> {
    Ok(bce_loss_grad(s, y)?.0)
}

/// Composite loss on `(T, H, W)` logits and its gradient in the logits.
pub fn composite_loss_grad<T: Scalar>(
    logits: &Tensor<T>,
    target: &LossTarget<T>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Tensor<T>)> {
    let shape = logits.shape();
    if shape.len() != 3 || shape != target.density.shape() {
        return Err(Error::Shape(format!("logits {shape:?} do not match target {:?}", target.density.shape())));
    }
    let frames = shape[0];
    let plane = shape[1] * shape[2];
    let inv_t = T::one() / T::from_usize_lossy(frames);
    let (wkl, wcc, wsim, wbce) = (T::lit(weights.kl), T::lit(weights.cc), T::lit(weights.sim), T::lit(weights.bce));
    let (mut kl, mut cc, mut sim, mut bce) = (T::zero(), T::zero(), T::zero(), T::zero());
    let mut grad = Vec::with_capacity(logits.numel());
    for t in 0..frames {
        let z = logits.slice_outer(t);
        let q = target.density.slice_outer(t);
        let y = target.bce.slice_outer(t);
        let s: Vec<T> = z.iter().map(|&v| v.sigmoid()).collect();
        let total: T = s.iter().copied().sum();
        let p: Vec<T> = s.iter().map(|&v| v / total).collect();

        let (v_kl, g_kl) = kl_loss_grad(&p, q)?;
        let (v_cc, g_cc) = cc_loss_grad(&p, q)?;
        let (v_sim, g_sim) = sim_loss_grad(&p, q)?;
        let (v_bce, g_bce) = bce_loss_grad(&s, y)?;
        kl += v_kl;
        cc += v_cc;
        sim += v_sim;
        bce += v_bce;

        // dL/dp, then through p = s / sum(s)
        let gp: Vec<T> = (0..plane).map(|i| wkl * g_kl[i] + wcc * g_cc[i] + wsim * g_sim[i]).collect();
        let dot: T = gp.iter().zip(&p).map(|(&g, &pi)| g * pi).sum();
        for i in 0..plane {
            let ds = (gp[i] - dot) / total + wbce * g_bce[i];
            grad.push(ds * s[i] * (T::one() - s[i]) * inv_t);
        }
    }
    let f = |v: T| (v * inv_t).to_f64_lossy();
    let breakdown = LossBreakdown::from_components(f(kl), f(cc), f(sim), f(bce), weights);
    Ok((breakdown, Tensor::from_vec(shape, grad)?))
}

pub fn composite_loss<T: Scalar>(
    logits: &Tensor<T>,
    target: &LossTarget<T>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    Ok(composite_loss_grad(logits, target, weights)?.0)
}
