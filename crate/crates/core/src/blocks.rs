//! Decoder building blocks shared by both experts.
//!
//! Every block owns the ids of its parameters in a [`ParamStore`] and adds
//! its forward computation to a [`Graph`]. Volumes are `(C, T, H, W)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Graph, NodeId};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Group count used by every normalization layer: up to 8 groups of at
/// least two channels.
pub fn norm_groups(channels: usize) -> usize {
    [8, 4, 2].into_iter().find(|g| channels.is_multiple_of(*g) && channels / g >= 2).unwrap_or(1)
}

fn expect_channels<T: Scalar>(g: &Graph<T>, x: NodeId, c: usize, what: &str) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 4 || s[0] != c {
        return Err(Error::Shape(format!("{what} expects ({c}, T, H, W), got {s:?}")));
    }
    Ok(())
}

/// Stride-1 3D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
    pub cin: usize,
    pub cout: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        init: Init,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.create(format!("{name}.weight"), &[cout, cin * geom.volume()], init, group, rng)?;
        let b = store.create(format!("{name}.bias"), &[cout], Init::Zeros, group, rng)?;
        Ok(Self { w, b, geom, cin, cout })
    }

    /// Fan-in scaled Gaussian weights.
    pub fn he<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        rng: &mut R,
    ) -> Result<Self> {
        let init = Init::FanIn { fan_in: cin * geom.volume(), gain: 1.0 };
        Self::new(store, name, cin, cout, geom, init, ParamGroup::Decoder, rng)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        g.conv3d(x, w, Some(b), self.geom)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// Group normalization with per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            gamma: store.create(format!("{name}.gamma"), &[channels], Init::Const(1.0), group, rng)?,
            beta: store.create(format!("{name}.beta"), &[channels], Init::Zeros, group, rng)?,
            groups: norm_groups(channels),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Two-stage channel compression `C_b -> (C_b + C_d) / 2 -> C_d`: a
/// pointwise conv then a 3x3x3 conv, each followed by norm and SiLU.
#[derive(Debug, Clone)]
pub struct Projection {
    pub conv1: Conv3d,
    pub norm1: GroupNorm,
    pub conv2: Conv3d,
    pub norm2: GroupNorm,
}

impl Projection {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if c_out == 0 || c_in < c_out {
            return Err(Error::InvalidArgument(format!("projection must compress channels, got {c_in} -> {c_out}")));
        }
        let mid = (c_in + c_out) / 2;
        let d = ParamGroup::Decoder;
        Ok(Self {
            conv1: Conv3d::he(store, &format!("{name}.conv1"), c_in, mid, ConvGeom::pointwise(), rng)?,
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), mid, d, rng)?,
            conv2: Conv3d::he(store, &format!("{name}.conv2"), mid, c_out, ConvGeom::same([3, 3, 3]), rng)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), c_out, d, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        expect_channels(g, x, self.conv1.cin, "projection")?;
        let h = self.conv1.forward(g, s, x)?;
        let h = self.norm1.forward(g, s, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, s, h)?;
        let h = self.norm2.forward(g, s, h)?;
        Ok(g.silu(h))
    }
}

/// `x + conv(silu(norm(conv(x))))` with the last conv zero-initialized, so
/// the block starts as the identity.
#[derive(Debug, Clone)]
pub struct ResBlend3d {
    pub conv1: Conv3d,
    pub norm: GroupNorm,
    pub conv2: Conv3d,
}

impl ResBlend3d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let geom = ConvGeom::same([3, 3, 3]);
        let d = ParamGroup::Decoder;
        Ok(Self {
            conv1: Conv3d::he(store, &format!("{name}.conv1"), channels, channels, geom, rng)?,
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, d, rng)?,
            conv2: Conv3d::new(store, &format!("{name}.conv2"), channels, channels, geom, Init::Zeros, d, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        expect_channels(g, x, self.conv1.cin, "res_blend3d")?;
        let h = self.conv1.forward(g, s, x)?;
        let h = self.norm.forward(g, s, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, s, h)?;
        g.add(x, h)
    }
}

/// Feature-wise modulation `x + gamma(cls) * x + beta(cls)` with both
/// predictor heads zero-initialized.
#[derive(Debug, Clone)]
pub struct Film {
    pub gamma: Conv3d,
    pub beta: Conv3d,
    pub cls_dim: usize,
}

impl Film {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cls_dim: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let p = ConvGeom::pointwise();
        let d = ParamGroup::Decoder;
        Ok(Self {
            gamma: Conv3d::new(store, &format!("{name}.gamma"), cls_dim, channels, p, Init::Zeros, d, rng)?,
            beta: Conv3d::new(store, &format!("{name}.beta"), cls_dim, channels, p, Init::Zeros, d, rng)?,
            cls_dim,
        })
    }

    /// `cls` is a `(D_cls)` vector node.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: NodeId, cls: NodeId) -> Result<NodeId> {
        expect_channels(g, x, self.gamma.cout, "film")?;
        if g.shape(cls) != [self.cls_dim] {
            return Err(Error::Shape(format!("film expects a ({}) cls vector, got {:?}", self.cls_dim, g.shape(cls))));
        }
        let c = g.reshape(cls, &[self.cls_dim, 1, 1, 1])?;
        let gamma = self.gamma.forward(g, s, c)?;
        let beta = self.beta.forward(g, s, c)?;
        let scaled = g.mul(x, gamma)?;
        let h = g.add(x, scaled)?;
        g.add(h, beta)
    }
}

/// Per-frame gate `(1, T, 1, 1)` in `(0, 1)`: spatial pooling, a temporal
/// kernel-3 conv to one channel, sigmoid.
#[derive(Debug, Clone)]
pub struct TemporalGate {
    pub conv: Conv3d,
}

impl TemporalGate {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let geom = ConvGeom { kernel: [3, 1, 1], pad: [1, 0, 0] };
        Ok(Self { conv: Conv3d::he(store, &format!("{name}.conv"), channels, 1, geom, rng)? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        expect_channels(g, x, self.conv.cin, "temporal_gate")?;
        let pooled = g.mean_spatial(x)?;
        let z = self.conv.forward(g, s, pooled)?;
        Ok(g.sigmoid(z))
    }
}

/// Single-channel attention map `(1, T, h, w)` in `(0, 1)` from the deepest
/// features.
#[derive(Debug, Clone)]
pub struct TemporalAttention {
    pub conv: Conv3d,
}

impl TemporalAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self { conv: Conv3d::he(store, &format!("{name}.conv"), channels, 1, ConvGeom::pointwise(), rng)? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        expect_channels(g, x, self.conv.cin, "temporal_attention")?;
        let z = self.conv.forward(g, s, x)?;
        Ok(g.sigmoid(z))
    }
}

/// Learnable `(H, W)` prior added to every frame's logits.
#[derive(Debug, Clone)]
pub struct CenterBias {
    pub map: ParamId,
    pub h: usize,
    pub w: usize,
}

/// Unit-peak Gaussian centered at `((H-1)/2, (W-1)/2)` with
/// `sigma = min(H, W) / 4`, row-major.
pub fn center_bias_init(h: usize, w: usize) -> Vec<f64> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let sigma = h.min(w) as f64 / 4.0;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            out.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    out
}

impl CenterBias {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, h: usize, w: usize) -> Result<Self> {
        let data = center_bias_init(h, w).into_iter().map(T::lit).collect();
        let map = store.insert(
            format!("{name}.map"),
            crate::tensor::Tensor::from_vec(&[h, w], data)?,
            ParamGroup::Decoder,
        )?;
        Ok(Self { map, h, w })
    }

    /// Adds the prior to `(C, T, H, W)` logits.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[2] != self.h || shape[3] != self.w {
            return Err(Error::Shape(format!("center bias is {}x{}, logits are {shape:?}", self.h, self.w)));
        }
        let m = g.param(s, self.map);
        let m = g.reshape(m, &[1, 1, self.h, self.w])?;
        g.add(x, m)
    }
}

/// Decoding head: pointwise squeeze to `C_h`, then `log2(P)` rounds of
/// nearest 2x upsampling + [`ResBlend3d`], then a zero-initialized 3x3x3
/// conv to one logit channel.
#[derive(Debug, Clone)]
pub struct RefineHead {
    pub squeeze: Conv3d,
    pub stages: Vec<ResBlend3d>,
    pub out: Conv3d,
}

impl RefineHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_head: usize,
        patch: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !patch.is_power_of_two() {
            return Err(Error::InvalidArgument(format!("patch size {patch} must be a power of two")));
        }
        let n_up = patch.trailing_zeros() as usize;
        let squeeze = Conv3d::he(store, &format!("{name}.squeeze"), c_in, c_head, ConvGeom::pointwise(), rng)?;
        let stages =
            (0..n_up).map(|i| ResBlend3d::new(store, &format!("{name}.up{i}"), c_head, rng)).collect::<Result<_>>()?;
        let out = Conv3d::new(
            store,
            &format!("{name}.out"),
            c_head,
            1,
            ConvGeom::same([3, 3, 3]),
            Init::Zeros,
            ParamGroup::Decoder,
            rng,
        )?;
        Ok(Self { squeeze, stages, out })
    }

    /// `(C_d, T, h, w) -> (1, T, h * P, w * P)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let mut h = self.squeeze.forward(g, s, x)?;
        for stage in &self.stages {
            h = g.upsample2x(h)?;
            h = stage.forward(g, s, h)?;
        }
        self.out.forward(g, s, h)
    }
}
