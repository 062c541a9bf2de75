//! Deterministic multi-level feature extractor with low-rank adapters.
//!
//! The stub patchifies each frame, embeds tokens with a dense layer and runs
//! a stack of residual layers (norm, depthwise 3x3x3 token mixing, two dense
//! channel projections). Four intermediate residual streams are tapped as the
//! pyramid; the global vector is a dense projection of the pooled last tap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::GroupNorm;
use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Graph, NodeId};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Depth of the reference extractor whose tap layers the stub mirrors.
pub const REFERENCE_DEPTH: usize = 48;
/// Tapped layers of the reference extractor (0-based).
pub const REFERENCE_TAPS: [usize; 4] = [11, 23, 35, 47];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TapConfig {
    pub depth: usize,
    pub tap_layers: Vec<usize>,
    pub patch: usize,
    pub channels: usize,
    pub cls_dim: usize,
}

impl Default for TapConfig {
    fn default() -> Self {
        Self { depth: 8, tap_layers: scaled_taps(8), patch: 8, channels: 64, cls_dim: 256 }
    }
}

/// Reference taps mapped proportionally onto a stack of `depth` layers.
pub fn scaled_taps(depth: usize) -> Vec<usize> {
    REFERENCE_TAPS.iter().map(|&l| ((l + 1) * depth / REFERENCE_DEPTH).max(1) - 1).collect()
}

impl TapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tap_layers.len() != 4 {
            return Err(Error::InvalidArgument(format!("exactly 4 tap layers required, got {:?}", self.tap_layers)));
        }
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "tap layers must be strictly increasing, got {:?}",
                self.tap_layers
            )));
        }
        if self.tap_layers[3] >= self.depth {
            return Err(Error::InvalidArgument(format!(
                "tap layer {} exceeds stub depth {}",
                self.tap_layers[3], self.depth
            )));
        }
        if self.patch == 0 || self.channels == 0 || self.cls_dim == 0 {
            return Err(Error::InvalidArgument("patch, channels and cls_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Four `(C_b, T, h, w)` levels, shallow to deep, plus a `(D_cls)` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
    pub cls: Tensor<T>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != 4 {
            return Err(Error::Shape(format!("pyramid needs 4 levels, got {}", self.levels.len())));
        }
        let s0 = self.levels[0].shape();
        if s0.len() != 4 || self.levels.iter().any(|l| l.shape() != s0) {
            return Err(Error::Shape("pyramid levels must share one (C, T, h, w) shape".into()));
        }
        if self.cls.shape().len() != 1 {
            return Err(Error::Shape("cls must be a vector".into()));
        }
        if !self.levels.iter().all(Tensor::all_finite) || !self.cls.all_finite() {
            return Err(Error::InvalidArgument("pyramid has non-finite values".into()));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> FeaturePyramid<U> {
        FeaturePyramid { levels: self.levels.iter().map(Tensor::cast).collect(), cls: self.cls.cast() }
    }

    /// Binds the pyramid as constant graph inputs.
    pub fn to_graph(&self, g: &mut Graph<T>) -> PyramidNodes {
        PyramidNodes { levels: [0, 1, 2, 3].map(|i| g.input(self.levels[i].clone())), cls: g.input(self.cls.clone()) }
    }
}

/// Pyramid as nodes of a graph under construction.
#[derive(Debug, Clone, Copy)]
pub struct PyramidNodes {
    pub levels: [NodeId; 4],
    pub cls: NodeId,
}

/// Low-rank update `(alpha / r) * B A` of a dense weight.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// `(r, d_in)`.
    pub a: ParamId,
    /// `(d_out, r)`, zero at creation.
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

/// Channel projection applied pointwise to a `(C, T, h, w)` volume.
#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    /// `(d_out, d_in)`.
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<LoraAdapter>,
}

impl Dense {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let g = ParamGroup::Backbone;
        let w = store.create(format!("{name}.weight"), &[d_out, d_in], Init::FanIn { fan_in: d_in, gain }, g, rng)?;
        let b = if bias { Some(store.create(format!("{name}.bias"), &[d_out], Init::Zeros, g, rng)?) } else { None };
        Ok(Self { name: name.to_string(), w, b, d_in, d_out, lora: None })
    }

    fn attach_lora<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        rank: usize,
        alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let g = ParamGroup::Lora;
        let a = store.create(format!("{}.lora_a", self.name), &[rank, self.d_in], Init::Normal(0.02), g, rng)?;
        let b = store.create(format!("{}.lora_b", self.name), &[self.d_out, rank], Init::Zeros, g, rng)?;
        self.lora = Some(LoraAdapter { a, b, rank, alpha });
        Ok(())
    }

    fn weight<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>) -> Result<NodeId> {
        let w = g.param(s, self.w);
        match &self.lora {
            None => Ok(w),
            Some(l) => {
                let a = g.param(s, l.a);
                let b = g.param(s, l.b);
                let ba = g.matmul(b, a)?;
                let delta = g.scale(ba, T::lit(l.alpha / l.rank as f64));
                g.add(w, delta)
            }
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = self.weight(g, s)?;
        let b = self.b.map(|b| g.param(s, b));
        g.conv3d(x, w, b, ConvGeom::pointwise())
    }
}

#[derive(Debug, Clone)]
struct Layer {
    norm: GroupNorm,
    mix_w: ParamId,
    mix_b: ParamId,
    dense_in: Dense,
    dense_out: Dense,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: TapConfig,
    embed: Dense,
    layers: Vec<Layer>,
    cls_proj: Dense,
    lora: Option<(usize, f64)>,
}

impl Backbone {
    /// Registers the extractor's weights, drawn from `seed` alone so every
    /// expert sees the same frozen extractor.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: TapConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels;
        let geom = ConvGeom::same([3, 3, 3]);
        let embed = Dense::new(store, "backbone.embed", 3 * cfg.patch * cfg.patch, c, 1.0, true, &mut rng)?;
        let layers = (0..cfg.depth)
            .map(|i| {
                let p = format!("backbone.layer{i}");
                let g = ParamGroup::Backbone;
                Ok(Layer {
                    norm: GroupNorm::new(store, &format!("{p}.norm"), c, g, &mut rng)?,
                    mix_w: store.create(
                        format!("{p}.mix.weight"),
                        &[c, geom.volume()],
                        Init::FanIn { fan_in: geom.volume(), gain: 1.0 },
                        g,
                        &mut rng,
                    )?,
                    mix_b: store.create(format!("{p}.mix.bias"), &[c], Init::Zeros, g, &mut rng)?,
                    dense_in: Dense::new(store, &format!("{p}.dense_in"), c, c, 1.0, true, &mut rng)?,
                    dense_out: Dense::new(store, &format!("{p}.dense_out"), c, c, 0.5, true, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cls_proj = Dense::new(store, "backbone.cls", c, cfg.cls_dim, 1.0, true, &mut rng)?;
        Ok(Self { cfg, embed, layers, cls_proj, lora: None })
    }

    fn denses_mut(&mut self) -> Vec<&mut Dense> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.push(&mut l.dense_in);
            out.push(&mut l.dense_out);
        }
        out.push(&mut self.cls_proj);
        out
    }

    fn denses(&self) -> Vec<&Dense> {
        let mut out = vec![&self.embed];
        for l in &self.layers {
            out.push(&l.dense_in);
            out.push(&l.dense_out);
        }
        out.push(&self.cls_proj);
        out
    }

    /// `(rank, alpha)` of the inserted adapters.
    pub fn lora(&self) -> Option<(usize, f64)> {
        self.lora
    }

    /// Attaches a zero-initialized adapter to every dense projection.
    pub fn insert_lora<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::State("LoRA adapters are already inserted".into()));
        }
        if rank == 0 || !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "LoRA needs rank >= 1 and alpha > 0, got r={rank} alpha={alpha}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for d in self.denses_mut() {
            d.attach_lora(store, rank, alpha, &mut rng)?;
        }
        self.lora = Some((rank, alpha));
        Ok(())
    }

    /// Base extractor weights.
    pub fn base_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for d in self.denses() {
            out.push(d.w);
            out.extend(d.b);
        }
        for l in &self.layers {
            out.extend([l.norm.gamma, l.norm.beta, l.mix_w, l.mix_b]);
        }
        out.sort();
        out
    }

    pub fn lora_params(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> =
            self.denses().into_iter().filter_map(|d| d.lora.as_ref()).flat_map(|l| [l.a, l.b]).collect();
        out.sort();
        out
    }

    /// Stage 1 freezes the whole extractor; stage 2 (after [`insert_lora`])
    /// trains only the adapters.
    ///
    /// [`insert_lora`]: Backbone::insert_lora
    pub fn set_stage<T: Scalar>(&self, store: &mut ParamStore<T>, stage: u8) -> Result<()> {
        match stage {
            1 | 2 => {}
            other => {
                return Err(Error::InvalidArgument(format!("stage must be 1 or 2, got {other}")));
            }
        }
        if stage == 2 && self.lora.is_none() {
            return Err(Error::State("stage 2 requires inserted LoRA adapters".into()));
        }
        for id in self.base_params() {
            store.set_trainable(id, false);
        }
        for id in self.lora_params() {
            store.set_trainable(id, stage == 2);
        }
        Ok(())
    }

    /// Pyramid nodes for a `(T, 3, H, W)` clip node.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, clip: NodeId) -> Result<PyramidNodes> {
        let shape = g.shape(clip).to_vec();
        let p = self.cfg.patch;
        if shape.len() != 4 || shape[1] != 3 || !shape[2].is_multiple_of(p) || !shape[3].is_multiple_of(p) {
            return Err(Error::Shape(format!("clip {shape:?} must be (T, 3, H, W) with H, W divisible by {p}")));
        }
        let tokens = g.patchify(clip, p)?;
        let mut x = self.embed.forward(g, s, tokens)?;
        let mut taps = Vec::with_capacity(4);
        for (i, layer) in self.layers.iter().enumerate() {
            let n = layer.norm.forward(g, s, x)?;
            let mw = g.param(s, layer.mix_w);
            let mb = g.param(s, layer.mix_b);
            let m = g.depthwise_conv3d(n, mw, Some(mb), ConvGeom::same([3, 3, 3]))?;
            let h = layer.dense_in.forward(g, s, m)?;
            let h = g.silu(h);
            let h = layer.dense_out.forward(g, s, h)?;
            x = g.add(x, h)?;
            if self.cfg.tap_layers.contains(&i) {
                taps.push(x);
            }
        }
        let pooled = g.mean_volume(taps[3])?;
        let cls = self.cls_proj.forward(g, s, pooled)?;
        let cls = g.reshape(cls, &[self.cfg.cls_dim])?;
        Ok(PyramidNodes { levels: [taps[0], taps[1], taps[2], taps[3]], cls })
    }

    pub fn extract_features<T: Scalar>(&self, s: &ParamStore<T>, clip: &VideoClip) -> Result<FeaturePyramid<T>> {
        let mut g = Graph::new();
        let x = g.input(clip.frames.cast());
        let nodes = self.forward(&mut g, s, x)?;
        Ok(FeaturePyramid {
            levels: nodes.levels.iter().map(|&n| g.value(n).clone()).collect(),
            cls: g.value(nodes.cls).clone(),
        })
    }

    /// Random adapter perturbation, for exercising stage-2 code paths.
    pub fn perturb_lora<T: Scalar>(&self, store: &mut ParamStore<T>, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in self.lora_params() {
            for v in store.value_mut(id).data_mut() {
                *v += T::lit(rng.random_range(-scale..scale));
            }
        }
    }
}
