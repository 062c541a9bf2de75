//! The two expert decoders and the model that pairs each with an extractor.
//!
//! Expert 1 modulates shallower levels top-down with an attention map from
//! the deepest level, conditions every stage on the global vector and adds a
//! learnable center prior. Expert 2 gates the deepest level over time, fuses
//! levels by ordered concatenation and supervises intermediate stages with
//! auxiliary heads.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeaturePyramid, PyramidNodes, TapConfig};
use crate::blocks::{CenterBias, Conv3d, Film, Projection, RefineHead, ResBlend3d, TemporalAttention, TemporalGate};
use crate::data::{SaliencyTarget, VideoClip};
use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Graph, NodeId};
use crate::losses::{composite_loss_grad, BceTarget, LossBreakdown, LossTarget, LossWeights};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ExpertKind {
    One,
    Two,
}

impl ExpertKind {
    pub fn id(self) -> u8 {
        match self {
            Self::One => 1,
            Self::Two => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Self::One),
            2 => Ok(Self::Two),
            other => Err(Error::InvalidArgument(format!("expert must be 1 or 2, got {other}"))),
        }
    }
}

impl TryFrom<u8> for ExpertKind {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Self::from_id(v)
    }
}

impl From<ExpertKind> for u8 {
    fn from(k: ExpertKind) -> u8 {
        k.id()
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub c_d: usize,
    /// Expert 2 only; at most 3.
    pub n_aux_heads: usize,
    pub aux_weight: f64,
    /// Channel width of the refinement head.
    pub head_channels: usize,
    pub loss_weights: LossWeights,
    pub bce_target: BceTarget,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            c_d: 32,
            n_aux_heads: 3,
            aux_weight: 0.4,
            head_channels: 8,
            loss_weights: LossWeights::default(),
            bce_target: BceTarget::ScaledDensity,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_aux_heads > 3 {
            return Err(Error::InvalidArgument(format!("at most 3 auxiliary heads, got {}", self.n_aux_heads)));
        }
        if !(self.aux_weight.is_finite() && self.aux_weight >= 0.0) {
            return Err(Error::InvalidArgument(format!("aux_weight must be non-negative, got {}", self.aux_weight)));
        }
        if self.c_d == 0 || self.head_channels == 0 {
            return Err(Error::InvalidArgument("decoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: TapConfig,
    pub expert: ExpertConfig,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    /// Seed of the shared frozen extractor.
    pub backbone_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: TapConfig::default(),
            expert: ExpertConfig::default(),
            height: 32,
            width: 32,
            backbone_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.expert.validate()?;
        let p = self.backbone.patch;
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(p) || !self.width.is_multiple_of(p) {
            return Err(Error::Shape(format!("output {}x{} not divisible by patch {p}", self.height, self.width)));
        }
        if self.expert.c_d > self.backbone.channels {
            return Err(Error::InvalidArgument(format!(
                "C_d={} exceeds backbone channels {}",
                self.expert.c_d, self.backbone.channels
            )));
        }
        Ok(())
    }

    /// `(h, w)` of the token grid.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.backbone.patch, self.width / self.backbone.patch)
    }
}

/// Logit nodes of one forward pass, each `(1, T, H, W)`.
#[derive(Debug, Clone)]
pub struct ExpertNodes {
    pub main: NodeId,
    pub aux: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Expert1 {
    pub attention: TemporalAttention,
    /// Shallow to deep.
    pub proj: Vec<Projection>,
    /// One per refined level, deep to shallow.
    pub blend: Vec<ResBlend3d>,
    pub film: Vec<Film>,
    pub head: RefineHead,
    pub center: CenterBias,
}

impl Expert1 {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (cb, cd) = (cfg.backbone.channels, cfg.expert.c_d);
        let n = "expert1";
        Ok(Self {
            attention: TemporalAttention::new(store, &format!("{n}.attention"), cb, rng)?,
            proj: (0..4)
                .map(|l| Projection::new(store, &format!("{n}.proj{l}"), cb, cd, rng))
                .collect::<Result<_>>()?,
            blend: (0..3).map(|k| ResBlend3d::new(store, &format!("{n}.blend{k}"), cd, rng)).collect::<Result<_>>()?,
            film: (0..3)
                .map(|k| Film::new(store, &format!("{n}.film{k}"), cfg.backbone.cls_dim, cd, rng))
                .collect::<Result<_>>()?,
            head: RefineHead::new(store, &format!("{n}.head"), cd, cfg.expert.head_channels, cfg.backbone.patch, rng)?,
            center: CenterBias::new(store, &format!("{n}.center"), cfg.height, cfg.width)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, pyr: &PyramidNodes) -> Result<ExpertNodes> {
        let deep = pyr.levels[3];
        let att = self.attention.forward(g, s, deep)?;
        let mut state = self.proj[3].forward(g, s, deep)?;
        for (k, level) in [2usize, 1, 0].into_iter().enumerate() {
            let x = pyr.levels[level];
            let (h, w) = (g.shape(x)[2], g.shape(x)[3]);
            let f = self.proj[level].forward(g, s, x)?;
            let a = g.upsample_to(att, h, w)?;
            let f = g.mul(f, a)?;
            let f = self.blend[k].forward(g, s, f)?;
            let f = self.film[k].forward(g, s, f, pyr.cls)?;
            let up = g.upsample_to(state, h, w)?;
            state = g.add(up, f)?;
        }
        let logits = self.head.forward(g, s, state)?;
        let main = self.center.forward(g, s, logits)?;
        Ok(ExpertNodes { main, aux: Vec::new() })
    }
}

#[derive(Debug, Clone)]
pub struct Expert2 {
    pub proj: Vec<Projection>,
    pub gate: TemporalGate,
    /// Pointwise `2 C_d -> C_d` per fusion stage, deep to shallow.
    pub fuse: Vec<Conv3d>,
    pub blend: Vec<ResBlend3d>,
    pub aux: Vec<Conv3d>,
    pub head: RefineHead,
}

impl Expert2 {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (cb, cd) = (cfg.backbone.channels, cfg.expert.c_d);
        let n = "expert2";
        let p = ConvGeom::pointwise();
        Ok(Self {
            proj: (0..4)
                .map(|l| Projection::new(store, &format!("{n}.proj{l}"), cb, cd, rng))
                .collect::<Result<_>>()?,
            gate: TemporalGate::new(store, &format!("{n}.gate"), cd, rng)?,
            fuse: (0..3)
                .map(|k| Conv3d::he(store, &format!("{n}.fuse{k}"), 2 * cd, cd, p, rng))
                .collect::<Result<_>>()?,
            blend: (0..3).map(|k| ResBlend3d::new(store, &format!("{n}.blend{k}"), cd, rng)).collect::<Result<_>>()?,
            aux: (0..cfg.expert.n_aux_heads)
                .map(|k| {
                    let init = Init::FanIn { fan_in: cd, gain: 0.1 };
                    Conv3d::new(store, &format!("{n}.aux{k}"), cd, 1, p, init, ParamGroup::Decoder, rng)
                })
                .collect::<Result<_>>()?,
            head: RefineHead::new(store, &format!("{n}.head"), cd, cfg.expert.head_channels, cfg.backbone.patch, rng)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, pyr: &PyramidNodes) -> Result<ExpertNodes> {
        let p =
            pyr.levels.iter().zip(&self.proj).map(|(&x, proj)| proj.forward(g, s, x)).collect::<Result<Vec<_>>>()?;
        let gate = self.gate.forward(g, s, p[3])?;
        let mut state = g.mul(p[3], gate)?;
        let mut aux = Vec::with_capacity(self.aux.len());
        for (k, level) in [2usize, 1, 0].into_iter().enumerate() {
            let (h, w) = (g.shape(p[level])[2], g.shape(p[level])[3]);
            let up = g.upsample_to(state, h, w)?;
            let cat = g.concat(up, p[level])?;
            let f = self.fuse[k].forward(g, s, cat)?;
            state = self.blend[k].forward(g, s, f)?;
            if let Some(head) = self.aux.get(k) {
                aux.push(head.forward(g, s, state)?);
            }
        }
        let main = self.head.forward(g, s, state)?;
        Ok(ExpertNodes { main, aux })
    }
}

#[derive(Debug, Clone)]
pub enum Decoder {
    One(Expert1),
    Two(Expert2),
}

impl Decoder {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, pyr: &PyramidNodes) -> Result<ExpertNodes> {
        for (i, &l) in pyr.levels.iter().enumerate() {
            if g.shape(l).len() != 4 {
                return Err(Error::Shape(format!("pyramid level {i} is not a volume")));
            }
        }
        match self {
            Self::One(e) => e.forward(g, s, pyr),
            Self::Two(e) => e.forward(g, s, pyr),
        }
    }
}

/// Logits of one clip: main `(T, H, W)` and coarser auxiliary maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutput<T> {
    pub main_logits: Tensor<T>,
    pub aux_logits: Vec<Tensor<T>>,
    pub expert_id: u8,
}

/// An extractor plus one expert decoder over a single parameter store.
#[derive(Debug, Clone)]
pub struct ExpertModel<T> {
    pub kind: ExpertKind,
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub decoder: Decoder,
}

impl<T: Scalar> ExpertModel<T> {
    /// Extractor weights come from `config.backbone_seed`, decoder weights
    /// from `seed`.
    pub fn new(kind: ExpertKind, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config.backbone.clone(), config.backbone_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let decoder = match kind {
            ExpertKind::One => Decoder::One(Expert1::new(&mut store, &config, &mut rng)?),
            ExpertKind::Two => Decoder::Two(Expert2::new(&mut store, &config, &mut rng)?),
        };
        backbone.set_stage(&mut store, 1)?;
        Ok(Self { kind, config, store, backbone, decoder })
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        self.store.iter().filter(|(_, p)| p.group == ParamGroup::Decoder).map(|(id, _)| id).collect()
    }

    /// Removes Expert 2's auxiliary heads; the main path is untouched.
    pub fn drop_aux_heads(&mut self) {
        if let Decoder::Two(e) = &mut self.decoder {
            e.aux.clear();
        }
    }

    /// Full forward pass from frames.
    pub fn forward_graph(&self, g: &mut Graph<T>, clip: &VideoClip) -> Result<ExpertNodes> {
        let x = g.input(clip.frames.cast());
        let pyr = self.backbone.forward(g, &self.store, x)?;
        self.decoder.forward(g, &self.store, &pyr)
    }

    /// Decoder-only forward pass from precomputed features.
    pub fn forward_features_graph(&self, g: &mut Graph<T>, pyr: &FeaturePyramid<T>) -> Result<ExpertNodes> {
        pyr.validate()?;
        let nodes = pyr.to_graph(g);
        self.decoder.forward(g, &self.store, &nodes)
    }

    pub fn forward(&self, clip: &VideoClip) -> Result<ExpertOutput<T>> {
        let mut g = Graph::new();
        let nodes = self.forward_graph(&mut g, clip)?;
        self.collect(&g, &nodes)
    }

    pub fn forward_features(&self, pyr: &FeaturePyramid<T>) -> Result<ExpertOutput<T>> {
        let mut g = Graph::new();
        let nodes = self.forward_features_graph(&mut g, pyr)?;
        self.collect(&g, &nodes)
    }

    pub fn collect(&self, g: &Graph<T>, nodes: &ExpertNodes) -> Result<ExpertOutput<T>> {
        let squeeze = |n: NodeId| {
            let v = g.value(n).clone();
            let s = v.shape().to_vec();
            v.reshape(&s[1..])
        };
        let out = ExpertOutput {
            main_logits: squeeze(nodes.main)?,
            aux_logits: nodes.aux.iter().map(|&n| squeeze(n)).collect::<Result<_>>()?,
            expert_id: self.kind.id(),
        };
        if !out.main_logits.all_finite() {
            return Err(Error::InvalidArgument("expert produced non-finite logits".into()));
        }
        Ok(out)
    }
}

/// Loss targets at the main resolution and at every auxiliary resolution.
#[derive(Debug, Clone)]
pub struct ExpertTargets<T> {
    pub main: LossTarget<T>,
    pub aux: Vec<LossTarget<T>>,
}

impl<T: Scalar> ExpertTargets<T> {
    /// `aux_dims` are the `(h, w)` of each auxiliary map.
    pub fn new(target: &SaliencyTarget, aux_dims: &[(usize, usize)], mode: BceTarget) -> Result<Self> {
        let main = LossTarget::new(target, mode);
        let aux = aux_dims.iter().map(|&(h, w)| main.downsample(h, w)).collect::<Result<_>>()?;
        Ok(Self { main, aux })
    }

    pub fn for_output(target: &SaliencyTarget, out: &ExpertOutput<T>, mode: BceTarget) -> Result<Self> {
        let dims: Vec<(usize, usize)> = out.aux_logits.iter().map(|a| (a.shape()[1], a.shape()[2])).collect();
        Self::new(target, &dims, mode)
    }
}

/// Main and auxiliary loss terms; `combined` folds the auxiliary terms in
/// with weight `lambda_aux`, component by component.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertLoss {
    pub combined: LossBreakdown,
    pub main: LossBreakdown,
    pub aux: Vec<LossBreakdown>,
}

/// Loss of an expert output and its gradients in the main and auxiliary
/// logits (already scaled by `lambda_aux`).
pub fn expert_loss_grads<T: Scalar>(
    out: &ExpertOutput<T>,
    targets: &ExpertTargets<T>,
    cfg: &ExpertConfig,
) -> Result<(ExpertLoss, Tensor<T>, Vec<Tensor<T>>)> {
    if out.aux_logits.len() != targets.aux.len() {
        return Err(Error::Shape(format!(
            "{} auxiliary maps but {} auxiliary targets",
            out.aux_logits.len(),
            targets.aux.len()
        )));
    }
    let w = &cfg.loss_weights;
    let (main, main_grad) = composite_loss_grad(&out.main_logits, &targets.main, w)?;
    let lambda = cfg.aux_weight;
    let mut sums = [main.kl, main.cc, main.sim, main.bce];
    let mut aux = Vec::with_capacity(out.aux_logits.len());
    let mut aux_grads = Vec::with_capacity(out.aux_logits.len());
    for (z, t) in out.aux_logits.iter().zip(&targets.aux) {
        let (b, mut gz) = composite_loss_grad(z, t, w)?;
        for (s, v) in sums.iter_mut().zip([b.kl, b.cc, b.sim, b.bce]) {
            *s += lambda * v;
        }
        gz.scale_inplace(T::lit(lambda));
        aux.push(b);
        aux_grads.push(gz);
    }
    let combined = LossBreakdown::from_components(sums[0], sums[1], sums[2], sums[3], w);
    Ok((ExpertLoss { combined, main, aux }, main_grad, aux_grads))
}

/// `composite(main) + lambda_aux * sum_k composite(aux_k)`.
pub fn expert_loss<T: Scalar>(
    out: &ExpertOutput<T>,
    target: &SaliencyTarget,
    cfg: &ExpertConfig,
) -> Result<ExpertLoss> {
    let targets = ExpertTargets::for_output(target, out, cfg.bce_target)?;
    Ok(expert_loss_grads(out, &targets, cfg)?.0)
}

/// Seeds for [`Graph::backward`] from logit gradients.
pub fn loss_seeds<T: Scalar>(
    g: &Graph<T>,
    nodes: &ExpertNodes,
    main_grad: Tensor<T>,
    aux_grads: Vec<Tensor<T>>,
) -> Result<Vec<(NodeId, Tensor<T>)>> {
    let mut seeds = vec![(nodes.main, main_grad.reshape(g.shape(nodes.main))?)];
    for (&n, gz) in nodes.aux.iter().zip(aux_grads) {
        seeds.push((n, gz.reshape(g.shape(n))?));
    }
    Ok(seeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_clip, ClipRecord, SynthSpec};
    use crate::gradcheck::{finite_difference_check, sample_entries};
    use crate::losses::composite_loss;
    use rand::Rng;

    fn record(t: usize, hw: usize, seed: u64) -> ClipRecord {
        if hw >= 8 {
            let spec = SynthSpec { patch: 2, ..SynthSpec::new(t, hw, hw, 1) };
            return generate_synthetic_clip(seed, &spec).unwrap();
        }
        // below the generator's minimum size: random frames and density
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = Tensor::from_fn(&[t, 3, hw, hw], |_| rng.random_range(0.0f32..1.0));
        let plane = hw * hw;
        let mut density = Vec::new();
        let mut fix = vec![0u8; t * plane];
        for ti in 0..t {
            let raw: Vec<f64> = (0..plane).map(|_| rng.random_range(0.05..1.0)).collect();
            density.extend(crate::data::normalize_to_distribution(&raw).into_iter().map(|v| v as f32));
            fix[ti * plane + rng.random_range(0..plane)] = 1;
        }
        let density = Tensor::from_vec(&[t, hw, hw], density).unwrap();
        let density = Tensor::from_vec(
            &[t, hw, hw],
            (0..t).flat_map(|ti| crate::data::normalize_to_distribution(density.slice_outer(ti))).collect(),
        )
        .unwrap();
        ClipRecord::new(VideoClip::new(frames, "tiny", 25.0).unwrap(), SaliencyTarget::new(density, fix).unwrap(), seed)
            .unwrap()
    }

    /// Small geometry: 2x2 patches over an 8x8 frame.
    fn tiny_config(hw: usize) -> ModelConfig {
        ModelConfig {
            backbone: TapConfig { depth: 4, tap_layers: vec![0, 1, 2, 3], patch: 2, channels: 8, cls_dim: 6 },
            expert: ExpertConfig { c_d: 4, head_channels: 4, ..ExpertConfig::default() },
            height: hw,
            width: hw,
            backbone_seed: 0,
        }
    }

    #[test]
    fn default_shapes() {
        let rec = generate_synthetic_clip(1, &SynthSpec::new(20, 32, 32, 1)).unwrap();
        for kind in [ExpertKind::One, ExpertKind::Two] {
            let m = ExpertModel::<f32>::new(kind, ModelConfig::default(), 5).unwrap();
            let out = m.forward(&rec.clip).unwrap();
            assert_eq!(out.main_logits.shape(), [20, 32, 32]);
            assert_eq!(out.expert_id, kind.id());
            match kind {
                ExpertKind::One => assert!(out.aux_logits.is_empty()),
                ExpertKind::Two => {
                    assert_eq!(out.aux_logits.len(), 3);
                    for a in &out.aux_logits {
                        assert_eq!(a.shape(), [20, 4, 4]);
                    }
                }
            }
        }
    }

    #[test]
    fn expert1_starts_at_center_bias() {
        let rec = generate_synthetic_clip(1, &SynthSpec::new(4, 32, 32, 2)).unwrap();
        let m = ExpertModel::<f64>::new(ExpertKind::One, ModelConfig::default(), 5).unwrap();
        let out = m.forward(&rec.clip).unwrap();
        let Decoder::One(e) = &m.decoder else { unreachable!() };
        let c = m.store.value(e.center.map).data();
        for t in 0..4 {
            let frame = out.main_logits.slice_outer(t);
            let diff = frame.iter().zip(c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-6);
        }
    }

    #[test]
    fn expert2_gate_and_ordered_concat() {
        let rec = record(2, 8, 3);
        let mut m = ExpertModel::<f64>::new(ExpertKind::Two, tiny_config(8), 5).unwrap();
        let Decoder::Two(e) = m.decoder.clone() else { unreachable!() };
        // zero gate: deepest level is scaled by exactly one half
        for id in e.gate.conv.params() {
            m.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let x = g.input(rec.clip.frames.cast());
        let pyr = m.backbone.forward(&mut g, &m.store, x).unwrap();
        let deep = e.proj[3].forward(&mut g, &m.store, pyr.levels[3]).unwrap();
        let gate = e.gate.forward(&mut g, &m.store, deep).unwrap();
        assert!(g.value(gate).data().iter().all(|&v| v == 0.5));

        // swapping the two halves of every fusion conv's input is visible
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for id in m.decoder_params() {
            for v in m.store.value_mut(id).data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let base = m.forward(&rec.clip).unwrap();
        let mut swapped = m.clone();
        for conv in &e.fuse {
            let w = swapped.store.value_mut(conv.w);
            let cd = 4;
            for row in w.data_mut().chunks_mut(2 * cd) {
                let (a, b) = row.split_at_mut(cd);
                a.swap_with_slice(b);
            }
        }
        let other = swapped.forward(&rec.clip).unwrap();
        assert!(base.main_logits.max_abs_diff(&other.main_logits) > 1e-6);

        // aux heads are side branches
        let mut dropped = m.clone();
        dropped.drop_aux_heads();
        let no_aux = dropped.forward(&rec.clip).unwrap();
        assert!(no_aux.aux_logits.is_empty());
        assert_eq!(no_aux.main_logits, base.main_logits);
    }

    #[test]
    fn expert_loss_aggregation() {
        let rec = record(2, 8, 4);
        let m = ExpertModel::<f64>::new(ExpertKind::Two, tiny_config(8), 5).unwrap();
        let out = m.forward(&rec.clip).unwrap();
        let mut cfg = m.config.expert.clone();
        let loss = expert_loss(&out, &rec.target, &cfg).unwrap();
        let w = &cfg.loss_weights;
        let main_only = composite_loss(&out.main_logits, &LossTarget::new(&rec.target, cfg.bce_target), w).unwrap();
        assert_eq!(loss.main, main_only);
        let expect = main_only.total + 0.4 * loss.aux.iter().map(|b| b.total).sum::<f64>();
        assert!((loss.combined.total - expect).abs() < 1e-9);
        cfg.aux_weight = 0.0;
        let l0 = expert_loss(&out, &rec.target, &cfg).unwrap();
        assert!((l0.combined.total - main_only.total).abs() < 1e-12);

        let m1 = ExpertModel::<f64>::new(ExpertKind::One, tiny_config(8), 5).unwrap();
        let o1 = m1.forward(&rec.clip).unwrap();
        let l1 = expert_loss(&o1, &rec.target, &m1.config.expert).unwrap();
        assert_eq!(l1.combined, l1.main);
    }

    #[test]
    fn perfect_predictions_zero_the_distribution_losses() {
        let rec = record(2, 8, 6);
        let to_logits = |d: &Tensor<f64>| {
            d.map(|q| {
                let s = 0.5 * q;
                (s / (1.0 - s)).ln()
            })
        };
        let targets = ExpertTargets::<f64>::new(&rec.target, &[(4, 4), (2, 2)], BceTarget::ScaledDensity).unwrap();
        let out = ExpertOutput {
            main_logits: to_logits(&targets.main.density),
            aux_logits: targets.aux.iter().map(|t| to_logits(&t.density)).collect(),
            expert_id: 2,
        };
        let (loss, _, _) = expert_loss_grads(&out, &targets, &ExpertConfig::default()).unwrap();
        for b in std::iter::once(&loss.main).chain(&loss.aux) {
            assert!(b.kl.abs() < 1e-6 && b.cc.abs() < 1e-6 && b.sim.abs() < 1e-6, "{b:?}");
        }
    }

    /// Gradient of the expert loss w.r.t. sampled decoder and adapter
    /// parameters against central differences.
    pub(crate) fn gradient_check(kind: ExpertKind) -> f64 {
        let rec = record(2, 4, 8);
        let mut m = ExpertModel::<f64>::new(kind, tiny_config(4), 5).unwrap();
        m.backbone.insert_lora(&mut m.store, 2, 4.0, 1).unwrap();
        m.backbone.set_stage(&mut m.store, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for id in m.store.ids().collect::<Vec<_>>() {
            if m.store.get(id).trainable {
                for v in m.store.value_mut(id).data_mut() {
                    *v += rng.random_range(-0.2..0.2);
                }
            }
        }
        let cfg = m.config.expert.clone();
        let mut g = Graph::new();
        let nodes = m.forward_graph(&mut g, &rec.clip).unwrap();
        let out = m.collect(&g, &nodes).unwrap();
        let targets = ExpertTargets::for_output(&rec.target, &out, cfg.bce_target).unwrap();
        let (_, gm, ga) = expert_loss_grads(&out, &targets, &cfg).unwrap();
        let seeds = loss_seeds(&g, &nodes, gm, ga).unwrap();
        let grads = g.backward(seeds).unwrap().param_grads(&g);
        let ids: Vec<ParamId> = m.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        let picks = sample_entries(&m.store, &ids, 40, &mut rng);
        let (backbone, decoder) = (m.backbone.clone(), m.decoder.clone());
        let kind_id = m.kind;
        let config = m.config.clone();
        let rep = finite_difference_check(&mut m.store, &grads, &picks, 1e-6, 1e-6, |s| {
            let probe = ExpertModel {
                kind: kind_id,
                config: config.clone(),
                store: s.clone(),
                backbone: backbone.clone(),
                decoder: decoder.clone(),
            };
            let out = probe.forward(&rec.clip)?;
            Ok(expert_loss_grads(&out, &targets, &cfg)?.0.combined.total)
        })
        .unwrap();
        assert_eq!(rep.checked, 40);
        rep.max_rel_err
    }

    #[test]
    fn expert_gradients_match_finite_differences() {
        for kind in [ExpertKind::One, ExpertKind::Two] {
            let err = gradient_check(kind);
            assert!(err < 1e-4, "expert {kind}: {err}");
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.expert.n_aux_heads = 4;
        assert!(c.validate().is_err());
        let c = ModelConfig { height: 30, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        assert!(ExpertKind::from_id(3).is_err());
        let k: ExpertKind = serde_json::from_str("2").unwrap();
        assert_eq!(k, ExpertKind::Two);
    }
}
