//! Clips, saliency targets, synthetic data and on-disk formats.

pub(crate) mod container;
mod pgm;
mod synth;

pub use container::{
    decode_clip, decode_map, encode_clip, encode_map, read_clip_container, read_map_container, write_clip_container,
    write_map_container, MapKind, MapVolume, CLIP_MAGIC, MAP_MAGIC,
};
pub use pgm::{encode_pgm, write_pgm};
pub use synth::{generate_synthetic_clip, SynthSpec};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Frames of one clip, `(T, 3, H, W)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor<f32>,
    pub clip_id: String,
    pub fps: f32,
}

impl VideoClip {
    pub fn new(frames: Tensor<f32>, clip_id: impl Into<String>, fps: f32) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != 3 || s[0] == 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::Shape(format!("clip frames must be (T>=1, 3, H, W), got {s:?}")));
        }
        if !frames.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("clip values must be finite and in [0, 1]".into()));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { frames, clip_id: clip_id.into(), fps })
    }

    /// `(T, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[2], s[3])
    }
}

/// Ground truth for one clip: a per-frame density and binary fixations.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyTarget {
    /// `(T, H, W)`, every frame sums to one.
    pub density: Tensor<f32>,
    /// `(T, H, W)` of 0/1 bytes, at least one fixation per frame.
    pub fixations: Vec<u8>,
}

impl SaliencyTarget {
    pub fn new(density: Tensor<f32>, fixations: Vec<u8>) -> Result<Self> {
        let s = density.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("density must be (T, H, W), got {s:?}")));
        }
        if fixations.len() != density.numel() {
            return Err(Error::Shape("fixation map size differs from density".into()));
        }
        let plane = s[1] * s[2];
        for t in 0..s[0] {
            let frame = density.slice_outer(t);
            if frame.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("density frame {t} has negative or non-finite values")));
            }
            let sum: f64 = frame.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() >= 1e-6 {
                return Err(Error::NotNormalized { sum });
            }
            let fix = &fixations[t * plane..(t + 1) * plane];
            if fix.iter().any(|&f| f > 1) {
                return Err(Error::InvalidArgument("fixations must be 0 or 1".into()));
            }
            if !fix.contains(&1) {
                return Err(Error::InvalidArgument(format!("frame {t} has no fixation")));
            }
        }
        Ok(Self { density, fixations })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.density.shape();
        (s[0], s[1], s[2])
    }

    pub fn density_frame(&self, t: usize) -> &[f32] {
        self.density.slice_outer(t)
    }

    pub fn fixation_frame(&self, t: usize) -> &[u8] {
        let (_, h, w) = self.dims();
        &self.fixations[t * h * w..(t + 1) * h * w]
    }
}

/// A clip paired with its target and the seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip: VideoClip,
    pub target: SaliencyTarget,
    pub seed: u64,
}

impl ClipRecord {
    pub fn new(clip: VideoClip, target: SaliencyTarget, seed: u64) -> Result<Self> {
        if clip.dims() != target.dims() {
            return Err(Error::Shape(format!(
                "clip {:?} and target {:?} disagree on (T, H, W)",
                clip.dims(),
                target.dims()
            )));
        }
        Ok(Self { clip, target, seed })
    }
}

/// `T` strictly increasing frame indices spread uniformly over `n_total`.
pub fn uniform_frame_sample(n_total: usize, t: usize) -> Result<Vec<usize>> {
    if t == 0 || n_total < t {
        return Err(Error::InvalidArgument(format!("cannot sample {t} frames from {n_total}")));
    }
    if t == 1 {
        return Ok(vec![0]);
    }
    // round-half-up of i * (n - 1) / (t - 1), in exact integer arithmetic
    let (num, den) = (n_total - 1, t - 1);
    Ok((0..t).map(|i| (2 * i * num + den) / (2 * den)).collect())
}

/// Rescales a non-negative map to sum to one.
///
/// Maps with negative entries are first shifted by `-min`; an all-zero map
/// becomes uniform.
pub fn normalize_to_distribution<T: Scalar>(map: &[T]) -> Vec<T> {
    if map.is_empty() {
        return Vec::new();
    }
    let min = map.iter().copied().fold(T::infinity(), T::min);
    let shift = if min < T::zero() { -min } else { T::zero() };
    let sum: T = map.iter().map(|&v| v + shift).sum();
    if sum <= T::zero() {
        let u = T::one() / T::from_usize_lossy(map.len());
        return vec![u; map.len()];
    }
    map.iter().map(|&v| (v + shift) / sum).collect()
}
