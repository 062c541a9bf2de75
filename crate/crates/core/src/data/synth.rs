//! Moving Gaussian blob clips with analytically known saliency.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClipRecord, SaliencyTarget, VideoClip};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry and content knobs of a synthetic clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub n_blobs: usize,
    /// Backbone patch size; H and W must be multiples of it.
    pub patch: usize,
    /// Forces every blob to stand still.
    pub zero_velocity: bool,
    pub fps: f32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { t: 20, h: 32, w: 32, n_blobs: 1, patch: 8, zero_velocity: false, fps: 25.0 }
    }
}

impl SynthSpec {
    pub fn new(t: usize, h: usize, w: usize, n_blobs: usize) -> Self {
        Self { t, h, w, n_blobs, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        let p = self.patch.max(1);
        if self.t == 0 || self.h < 8 || self.w < 8 || !self.h.is_multiple_of(p) || !self.w.is_multiple_of(p) {
            return Err(Error::Shape(format!(
                "synthetic clip needs T >= 1 and H, W >= 8 divisible by patch {}; got T={} H={} W={}",
                self.patch, self.t, self.h, self.w
            )));
        }
        if !(1..=4).contains(&self.n_blobs) {
            return Err(Error::InvalidArgument(format!("n_blobs must be in 1..=4, got {}", self.n_blobs)));
        }
        Ok(())
    }

    /// Isotropic blob scale, `H / 8`.
    pub fn sigma(&self) -> f64 {
        self.h as f64 / 8.0
    }
}

/// One blob's straight-line path and color.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Blob {
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    pub color: [f64; 3],
}

impl Blob {
    /// `(row, col)` center at frame `t`.
    pub fn center(&self, t: usize) -> (f64, f64) {
        (self.start.0 + self.velocity.0 * t as f64, self.start.1 + self.velocity.1 * t as f64)
    }
}

/// Draws a velocity along one axis and a start keeping the whole path inside
/// `[margin, extent - 1 - margin]`.
fn axis_path(rng: &mut ChaCha8Rng, extent: usize, t: usize, margin: f64, still: bool) -> (f64, f64) {
    let span = (t.max(2) - 1) as f64;
    let lo = margin;
    let hi = (extent as f64 - 1.0 - margin).max(lo);
    let vmax = (hi - lo) / (2.0 * span);
    let v: f64 = if still || vmax <= 0.0 { 0.0 } else { rng.random_range(-vmax..=vmax) };
    let travel = v * (t.saturating_sub(1)) as f64;
    let s_lo = lo - travel.min(0.0);
    let s_hi = (hi - travel.max(0.0)).max(s_lo);
    let start = if s_hi > s_lo { rng.random_range(s_lo..=s_hi) } else { s_lo };
    (start, v)
}

pub(crate) fn draw_blobs(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Vec<Blob> {
    let margin = spec.sigma();
    (0..spec.n_blobs)
        .map(|_| {
            let (r0, vr) = axis_path(rng, spec.h, spec.t, margin, spec.zero_velocity);
            let (c0, vc) = axis_path(rng, spec.w, spec.t, margin, spec.zero_velocity);
            let color = [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)];
            Blob { start: (r0, c0), velocity: (vr, vc), color }
        })
        .collect()
}

/// Deterministic synthetic clip: `n_blobs` colored Gaussian blobs moving on
/// straight lines over a noisy background.
///
/// The density is the normalized equal-weight mixture of isotropic Gaussians
/// (sigma = H/8) at the blob centers; each frame gets exactly `n_blobs`
/// distinct fixation pixels drawn from that density.
pub fn generate_synthetic_clip(seed: u64, spec: &SynthSpec) -> Result<ClipRecord> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_len, h, w) = (spec.t, spec.h, spec.w);
    let sigma = spec.sigma();
    let blobs = draw_blobs(&mut rng, spec);
    let background = [rng.random_range(0.0..0.2), rng.random_range(0.0..0.2), rng.random_range(0.0..0.2)];

    let plane = h * w;
    let mut frames = vec![0.0f32; t_len * 3 * plane];
    let mut density = vec![0.0f32; t_len * plane];
    let mut fixations = vec![0u8; t_len * plane];
    let mut bump = vec![0.0f64; plane];
    let mut mix = vec![0.0f64; plane];

    for t in 0..t_len {
        mix.iter_mut().for_each(|v| *v = 0.0);
        let frame = &mut frames[t * 3 * plane..(t + 1) * 3 * plane];
        for (c, bg) in background.iter().enumerate() {
            for px in &mut frame[c * plane..(c + 1) * plane] {
                *px = (bg + rng.random_range(-0.02..0.02)) as f32;
            }
        }
        for blob in &blobs {
            let (cy, cx) = blob.center(t);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    bump[y * w + x] = (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
            for (c, &col) in blob.color.iter().enumerate() {
                for (px, &b) in frame[c * plane..(c + 1) * plane].iter_mut().zip(&bump) {
                    *px += (col * b) as f32;
                }
            }
            for (m, &b) in mix.iter_mut().zip(&bump) {
                *m += b;
            }
        }
        for px in frame.iter_mut() {
            *px = px.clamp(0.0, 1.0);
        }
        let total: f64 = mix.iter().sum();
        let dens = &mut density[t * plane..(t + 1) * plane];
        for (d, &m) in dens.iter_mut().zip(&mix) {
            *d = (m / total) as f32;
        }
        let fix = &mut fixations[t * plane..(t + 1) * plane];
        sample_fixations(&mut rng, &mix, spec.n_blobs.max(1), fix);
    }

    let frames = Tensor::from_vec(&[t_len, 3, h, w], frames)?;
    let density = Tensor::from_vec(&[t_len, h, w], density)?;
    let clip = VideoClip::new(frames, format!("synth-{seed:016x}"), spec.fps)?;
    let target = SaliencyTarget::new(density, fixations)?;
    ClipRecord::new(clip, target, seed)
}

/// Weighted sampling of `count` distinct pixels, proportional to `weights`.
fn sample_fixations(rng: &mut ChaCha8Rng, weights: &[f64], count: usize, out: &mut [u8]) {
    let mut w = weights.to_vec();
    for _ in 0..count.min(w.len()) {
        let total: f64 = w.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut idx = w.len() - 1;
            for (i, &wi) in w.iter().enumerate() {
                if u < wi {
                    idx = i;
                    break;
                }
                u -= wi;
            }
            // guard against landing on an exhausted pixel through rounding
            if w[idx] == 0.0 {
                idx = w.iter().position(|&v| v > 0.0).unwrap_or(idx);
            }
            idx
        } else {
            out.iter().position(|&f| f == 0).unwrap_or(0)
        };
        out[pick] = 1;
        w[pick] = 0.0;
    }
}
