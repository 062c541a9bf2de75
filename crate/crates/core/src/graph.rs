//! Reverse-mode automatic differentiation over rank-4 feature volumes.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse accumulating
//! vector-Jacobian products. Feature volumes are laid out `(C, T, H, W)` for a
//! single clip; batching is done by building one graph per clip.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

/// Per-thread pool of large temporary buffers. Column matrices of 3x3x3
/// convolutions run to tens of megabytes; reusing them avoids mapping and
/// faulting in fresh pages on every call.
mod scratch {
    use std::any::Any;
    use std::cell::RefCell;

    use crate::scalar::Scalar;

    const KEEP: usize = 4;

    thread_local! {
        static POOL: RefCell<Vec<Box<dyn Any>>> = const { RefCell::new(Vec::new()) };
    }

    /// A zero-filled buffer of `len` elements.
    pub fn take<T: Scalar>(len: usize) -> Vec<T> {
        let reused = POOL.with(|p| {
            let mut p = p.borrow_mut();
            let i = p.iter().position(|b| b.is::<Vec<T>>())?;
            p.swap_remove(i).downcast::<Vec<T>>().ok()
        });
        match reused {
            Some(mut v) => {
                v.clear();
                v.resize(len, T::zero());
                *v
            }
            None => vec![T::zero(); len],
        }
    }

    pub fn give<T: Scalar>(v: Vec<T>) {
        POOL.with(|p| {
            let mut p = p.borrow_mut();
            if p.len() < KEEP {
                p.push(Box::new(v));
            }
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Kernel extent and zero padding of a stride-1 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    /// "Same" padding for odd kernels.
    pub fn same(kernel: [usize; 3]) -> Self {
        Self { kernel, pad: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2] }
    }

    pub fn pointwise() -> Self {
        Self::same([1, 1, 1])
    }

    pub fn volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    fn out_dims(&self, d: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let padded = d[i] + 2 * self.pad[i];
            if padded < self.kernel[i] {
                return Err(Error::Shape(format!("kernel {:?} larger than padded input {:?}", self.kernel, d)));
            }
            out[i] = padded - self.kernel[i] + 1;
        }
        Ok(out)
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    Depthwise { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Silu(NodeId),
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    Upsample2x(NodeId),
    Concat(NodeId, NodeId),
    MeanSpatial(NodeId),
    MeanVolume(NodeId),
    MatMul(NodeId, NodeId),
    Scale(NodeId, T),
    Reshape(NodeId),
    Patchify { x: NodeId, patch: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, NodeId>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.grads[node.0].as_ref()
    }

    /// Gradients of every trainable parameter that received one.
    pub fn param_grads(self, graph: &Graph<T>) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> =
            self.grads.into_iter().enumerate().filter_map(|(i, g)| Some((graph.nodes[i].param?, g?))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is wanted, e.g. for sensitivity checks.
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated calls reuse the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        let p = store.get(id);
        let node = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.nodes[node.0].param = Some(id);
        self.params.insert(id, node);
        node
    }

    /// Stride-1 3D convolution. `x` is `(Cin, T, H, W)`, `w` is
    /// `(Cout, Cin * kt * kh * kw)`, `b` is `(Cout)`.
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom) -> Result<NodeId> {
        let [cin, d, h, wd] = dims4_checked(self.shape(x))?;
        let ws = self.shape(w);
        if ws.len() != 2 || ws[1] != cin * geom.volume() {
            return Err(Error::Shape(format!(
                "conv weight {ws:?} incompatible with {cin} input channels and kernel {:?}",
                geom.kernel
            )));
        }
        let cout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::Shape(format!("conv bias must be ({cout})")));
            }
        }
        let [od, oh, ow] = geom.out_dims([d, h, wd])?;
        let n = od * oh * ow;
        let mut out = vec![T::zero(); cout * n];
        {
            let xv = self.value(x);
            let col_owned = (!geom.is_pointwise()).then(|| im2col(xv.data(), [cin, d, h, wd], geom, [od, oh, ow]));
            let col: &[T] = col_owned.as_deref().unwrap_or(xv.data());
            let k = cin * geom.volume();
            T::gemm(cout, k, n, T::one(), self.value(w).data(), (k, 1), col, (n, 1), T::zero(), &mut out, (n, 1));
            if let Some(b) = b {
                for (row, &bias) in out.chunks_mut(n).zip(self.value(b).data()) {
                    for v in row {
                        *v += bias;
                    }
                }
            }
            if let Some(c) = col_owned {
                scratch::give(c);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_vec(&[cout, od, oh, ow], out)?;
        Ok(self.push(value, Op::Conv { x, w, b, geom }, rg))
    }

    /// Per-channel 3D convolution; `w` is `(C, kt * kh * kw)`.
    pub fn depthwise_conv3d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom) -> Result<NodeId> {
        let dims = dims4_checked(self.shape(x))?;
        let [c, d, h, wd] = dims;
        if self.shape(w) != [c, geom.volume()] {
            return Err(Error::Shape(format!("depthwise weight must be ({c}, {})", geom.volume())));
        }
        let od = geom.out_dims([d, h, wd])?;
        let mut out = vec![T::zero(); c * od.iter().product::<usize>()];
        depthwise_forward(self.value(x).data(), dims, self.value(w).data(), geom, od, &mut out);
        if let Some(b) = b {
            let n: usize = od.iter().product();
            for (row, &bias) in out.chunks_mut(n).zip(self.value(b).data()) {
                for v in row {
                    *v += bias;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_vec(&[c, od[0], od[1], od[2]], out)?;
        Ok(self.push(value, Op::Depthwise { x, w, b, geom }, rg))
    }

    /// Elementwise sum with size-1 broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product with size-1 broadcasting.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(T::sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v * v.sigmoid());
        let rg = self.rg(x);
        self.push(value, Op::Silu(x), rg)
    }

    /// Group normalization over `(C/groups, T, H, W)` slabs with per-channel
    /// affine `gamma`, `beta` of shape `(C)`.
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.shape()[0];
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(Error::Shape(format!("{c} channels not divisible into {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!("group norm affine must be ({c})")));
        }
        let per_channel = xv.numel() / c;
        let group_len = per_channel * (c / groups);
        let eps = T::lit(NORM_EPS);
        let inv_m = T::one() / T::from_usize_lossy(group_len);
        let gam = self.value(gamma).data();
        let bet = self.value(beta).data();
        let mut out = vec![T::zero(); xv.numel()];
        let mut means = Vec::with_capacity(groups);
        let mut rstds = Vec::with_capacity(groups);
        for (g, (src, dst)) in xv.data().chunks(group_len).zip(out.chunks_mut(group_len)).enumerate() {
            let mean = src.iter().copied().sum::<T>() * inv_m;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
            let rstd = T::one() / (var + eps).sqrt();
            for (k, (s, o)) in src.chunks(per_channel).zip(dst.chunks_mut(per_channel)).enumerate() {
                let ch = g * (c / groups) + k;
                let (ga, be) = (gam[ch], bet[ch]);
                for (&v, y) in s.iter().zip(o.iter_mut()) {
                    *y = (v - mean) * rstd * ga + be;
                }
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let value = Tensor::from_vec(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds }, rg))
    }

    /// Nearest-neighbour 2x spatial upsampling of `(C, T, H, W)`.
    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let [c, d, h, w] = dims4_checked(self.shape(x))?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * d * h2 * w2];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(h2 * w2)) {
            for y in 0..h2 {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for (xx, o) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                    *o = row[xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[c, d, h2, w2], out)?, Op::Upsample2x(x), rg))
    }

    /// Upsamples by repeated doubling until the spatial size matches.
    pub fn upsample_to(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let mut cur = x;
        loop {
            let s = self.shape(cur);
            if s[2] == h && s[3] == w {
                return Ok(cur);
            }
            if s[2] * 2 > h || s[3] * 2 > w || !h.is_multiple_of(s[2]) || !w.is_multiple_of(s[3]) {
                return Err(Error::Shape(format!("cannot upsample {}x{} to {h}x{w} by doubling", s[2], s[3])));
            }
            cur = self.upsample2x(cur)?;
        }
    }

    /// Concatenation along the channel axis; `a` comes first.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(Error::Shape(format!("cannot concat {sa:?} with {sb:?}")));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Concat(a, b), rg))
    }

    /// `(C, T, H, W) -> (C, T, 1, 1)` spatial average.
    pub fn mean_spatial(&mut self, x: NodeId) -> Result<NodeId> {
        let [c, d, h, w] = dims4_checked(self.shape(x))?;
        let inv = T::one() / T::from_usize_lossy(h * w);
        let data: Vec<T> = self.value(x).data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[c, d, 1, 1], data)?, Op::MeanSpatial(x), rg))
    }

    /// `(C, T, H, W) -> (C, 1, 1, 1)` average over everything but channels.
    pub fn mean_volume(&mut self, x: NodeId) -> Result<NodeId> {
        let [c, d, h, w] = dims4_checked(self.shape(x))?;
        let n = d * h * w;
        let inv = T::one() / T::from_usize_lossy(n);
        let data: Vec<T> = self.value(x).data().chunks(n).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[c, 1, 1, 1], data)?, Op::MeanVolume(x), rg))
    }

    /// Plain 2D matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            T::zero(),
            &mut out,
            (n, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Splits frames `(T, 3, H, W)` into non-overlapping `patch x patch`
    /// tiles, giving a token volume `(3 * patch^2, T, H/patch, W/patch)`.
    pub fn patchify(&mut self, x: NodeId, patch: usize) -> Result<NodeId> {
        let [t, c, h, w] = dims4_checked(self.shape(x))?;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::Shape(format!("frame size {h}x{w} not divisible by patch {patch}")));
        }
        let (gh, gw) = (h / patch, w / patch);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for_each_patch_index(t, c, h, w, patch, |si, oi| out[oi] = src[si]);
        let rg = self.rg(x);
        let value = Tensor::from_vec(&[c * patch * patch, t, gh, gw], out)?;
        Ok(self.push(value, Op::Patchify { x, patch }, rg))
    }

    /// Reverse sweep. Each seed is `(node, dL/dnode)`; several seeds are
    /// summed, which is how auxiliary heads join the main loss.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor<T>)>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            if g.shape() != self.shape(id) {
                return Err(Error::Shape(format!(
                    "seed gradient {:?} does not match node {:?}",
                    g.shape(),
                    self.shape(id)
                )));
            }
            accumulate(&mut grads[id.0], g);
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let xv = self.value(*x);
                let dims = xv.dims4();
                let cin = dims[0];
                let [cout, od, oh, ow] = g.dims4();
                let n = od * oh * ow;
                let k = cin * geom.volume();
                let col_owned =
                    (!geom.is_pointwise() && self.rg(*w)).then(|| im2col(xv.data(), dims, *geom, [od, oh, ow]));
                let col: &[T] = col_owned.as_deref().unwrap_or(xv.data());
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); cout * k];
                    T::gemm(cout, n, k, T::one(), g.data(), (n, 1), col, (1, n), T::zero(), &mut dw, (k, 1));
                    accumulate(&mut grads[w.0], Tensor::from_vec(self.shape(*w), dw)?);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let db: Vec<T> = g.data().chunks(n).map(|r| r.iter().copied().sum()).collect();
                    accumulate(&mut grads[b.0], Tensor::from_vec(&[cout], db)?);
                }
                if let Some(c) = col_owned {
                    scratch::give(c);
                }
                if self.rg(*x) {
                    let mut dcol = if geom.is_pointwise() { vec![T::zero(); k * n] } else { scratch::take(k * n) };
                    T::gemm(
                        k,
                        cout,
                        n,
                        T::one(),
                        self.value(*w).data(),
                        (1, k),
                        g.data(),
                        (n, 1),
                        T::zero(),
                        &mut dcol,
                        (n, 1),
                    );
                    let dx = if geom.is_pointwise() {
                        dcol
                    } else {
                        let dx = col2im(&dcol, dims, *geom, [od, oh, ow]);
                        scratch::give(dcol);
                        dx
                    };
                    accumulate(&mut grads[x.0], Tensor::from_vec(xv.shape(), dx)?);
                }
            }
            Op::Depthwise { x, w, b, geom } => {
                let xv = self.value(*x);
                let dims = xv.dims4();
                let [c, od, oh, ow] = g.dims4();
                let n = od * oh * ow;
                let (dx, dw) = depthwise_backward(
                    xv.data(),
                    dims,
                    self.value(*w).data(),
                    *geom,
                    [od, oh, ow],
                    g.data(),
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dw) = dw {
                    accumulate(&mut grads[w.0], Tensor::from_vec(self.shape(*w), dw)?);
                }
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], Tensor::from_vec(xv.shape(), dx)?);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let db: Vec<T> = g.data().chunks(n).map(|r| r.iter().copied().sum()).collect();
                    accumulate(&mut grads[b.0], Tensor::from_vec(&[c], db)?);
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if self.rg(p) {
                        let r = reduce_to(g, self.shape(p))?;
                        accumulate(&mut grads[p.0], r);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let r = mul_reduce(g, bv, av.shape())?;
                    accumulate(&mut grads[a.0], r);
                }
                if self.rg(*b) {
                    let r = mul_reduce(g, av, bv.shape())?;
                    accumulate(&mut grads[b.0], r);
                }
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, |gi, y| gi * y * (T::one() - y));
                accumulate(&mut grads[x.0], d);
            }
            Op::Silu(x) => {
                let d = g.zip_map(self.value(*x), |gi, v| {
                    let s = v.sigmoid();
                    gi * (s + v * s * (T::one() - s))
                });
                accumulate(&mut grads[x.0], d);
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let xv = self.value(*x);
                let c = xv.shape()[0];
                let per_channel = xv.numel() / c;
                let cpg = c / groups;
                let group_len = per_channel * cpg;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xv.numel()];
                let inv_m = T::one() / T::from_usize_lossy(group_len);
                for gi in 0..*groups {
                    let (mu, r) = (mean[gi], rstd[gi]);
                    let base = gi * group_len;
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for k in 0..cpg {
                        let ch = gi * cpg + k;
                        let off = base + k * per_channel;
                        let xs = &xv.data()[off..off + per_channel];
                        let gs = &g.data()[off..off + per_channel];
                        let mut dg = T::zero();
                        let mut db = T::zero();
                        for (&xi, &gy) in xs.iter().zip(gs) {
                            let xh = (xi - mu) * r;
                            dg += gy * xh;
                            db += gy;
                            let dxh = gy * gam[ch];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        dgamma[ch] += dg;
                        dbeta[ch] += db;
                    }
                    let (m1, m2) = (sum_dxh * inv_m, sum_dxh_xh * inv_m);
                    for k in 0..cpg {
                        let ch = gi * cpg + k;
                        let off = base + k * per_channel;
                        for (j, d) in (off..).zip(&mut dx[off..off + per_channel]) {
                            let xh = (xv.data()[j] - mu) * r;
                            let dxh = g.data()[j] * gam[ch];
                            *d = r * (dxh - m1 - xh * m2);
                        }
                    }
                }
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], Tensor::from_vec(xv.shape(), dx)?);
                }
                if self.rg(*gamma) {
                    accumulate(&mut grads[gamma.0], Tensor::from_vec(&[c], dgamma)?);
                }
                if self.rg(*beta) {
                    accumulate(&mut grads[beta.0], Tensor::from_vec(&[c], dbeta)?);
                }
            }
            Op::Upsample2x(x) => {
                let [c, d, h, w] = self.value(*x).dims4();
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![T::zero(); c * d * h * w];
                for (src, dst) in g.data().chunks(h2 * w2).zip(dx.chunks_mut(h * w)) {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                        }
                    }
                }
                accumulate(&mut grads[x.0], Tensor::from_vec(&[c, d, h, w], dx)?);
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).numel();
                if self.rg(*a) {
                    let t = Tensor::from_vec(self.shape(*a), g.data()[..na].to_vec())?;
                    accumulate(&mut grads[a.0], t);
                }
                if self.rg(*b) {
                    let t = Tensor::from_vec(self.shape(*b), g.data()[na..].to_vec())?;
                    accumulate(&mut grads[b.0], t);
                }
            }
            Op::MeanSpatial(x) | Op::MeanVolume(x) => {
                let xs = self.shape(*x);
                let block = xs.iter().product::<usize>() / g.numel();
                let inv = T::one() / T::from_usize_lossy(block);
                let mut dx = Vec::with_capacity(block * g.numel());
                for &gi in g.data() {
                    dx.extend(std::iter::repeat_n(gi * inv, block));
                }
                accumulate(&mut grads[x.0], Tensor::from_vec(xs, dx)?);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        (n, 1),
                        self.value(*b).data(),
                        (1, n),
                        T::zero(),
                        &mut da,
                        (k, 1),
                    );
                    accumulate(&mut grads[a.0], Tensor::from_vec(sa, da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(*a).data(),
                        (1, k),
                        g.data(),
                        (n, 1),
                        T::zero(),
                        &mut db,
                        (n, 1),
                    );
                    accumulate(&mut grads[b.0], Tensor::from_vec(sb, db)?);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                accumulate(&mut grads[x.0], g.map(|v| v * s));
            }
            Op::Reshape(x) => {
                let t = g.clone().reshape(self.shape(*x))?;
                accumulate(&mut grads[x.0], t);
            }
            Op::Patchify { x, patch } => {
                let xs = self.shape(*x);
                let [t, c, h, w] = [xs[0], xs[1], xs[2], xs[3]];
                let mut dx = vec![T::zero(); g.numel()];
                let gd = g.data();
                for_each_patch_index(t, c, h, w, *patch, |si, oi| dx[si] = gd[oi]);
                accumulate(&mut grads[x.0], Tensor::from_vec(xs, dx)?);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn dims4_checked(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::Shape(format!("expected (C, T, H, W), got {shape:?}"))),
    }
}

fn for_each_patch_index(t: usize, c: usize, h: usize, w: usize, patch: usize, mut f: impl FnMut(usize, usize)) {
    let (gh, gw) = (h / patch, w / patch);
    for ti in 0..t {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let si = ((ti * c + ci) * h + y) * w + x;
                    let ch = (ci * patch + y % patch) * patch + x % patch;
                    let oi = ((ch * t + ti) * gh + y / patch) * gw + x / patch;
                    f(si, oi);
                }
            }
        }
    }
}

/// Valid output range `[lo, hi)` along one axis for a kernel offset.
#[inline]
fn valid_range(out_len: usize, in_len: usize, offset: usize, pad: usize) -> (usize, usize) {
    // input index = o + offset - pad must lie in [0, in_len)
    let lo = pad.saturating_sub(offset);
    let hi = (in_len + pad).saturating_sub(offset).min(out_len);
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(x: &[T], dims: [usize; 4], geom: ConvGeom, od: [usize; 3]) -> Vec<T> {
    let [cin, d, h, w] = dims;
    let [kt, kh, kw] = geom.kernel;
    let [pt, ph, pw] = geom.pad;
    let n = od[0] * od[1] * od[2];
    let mut col = scratch::take(cin * geom.volume() * n);
    let mut row = 0;
    for ci in 0..cin {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for dt in 0..kt {
            let (t0, t1) = valid_range(od[0], d, dt, pt);
            for dy in 0..kh {
                let (y0, y1) = valid_range(od[1], h, dy, ph);
                for dx in 0..kw {
                    let (x0, x1) = valid_range(od[2], w, dx, pw);
                    let dst = &mut col[row * n..(row + 1) * n];
                    for to in t0..t1 {
                        let ti = to + dt - pt;
                        for yo in y0..y1 {
                            let yi = yo + dy - ph;
                            let src_row = (ti * h + yi) * w;
                            let dst_base = (to * od[1] + yo) * od[2];
                            dst[dst_base + x0..dst_base + x1]
                                .copy_from_slice(&xc[src_row + x0 + dx - pw..src_row + x1 + dx - pw]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(col: &[T], dims: [usize; 4], geom: ConvGeom, od: [usize; 3]) -> Vec<T> {
    let [cin, d, h, w] = dims;
    let [kt, kh, kw] = geom.kernel;
    let [pt, ph, pw] = geom.pad;
    let n = od[0] * od[1] * od[2];
    let mut x = vec![T::zero(); cin * d * h * w];
    let mut row = 0;
    for ci in 0..cin {
        let xc = &mut x[ci * d * h * w..(ci + 1) * d * h * w];
        for dt in 0..kt {
            let (t0, t1) = valid_range(od[0], d, dt, pt);
            for dy in 0..kh {
                let (y0, y1) = valid_range(od[1], h, dy, ph);
                for dx in 0..kw {
                    let (x0, x1) = valid_range(od[2], w, dx, pw);
                    let src = &col[row * n..(row + 1) * n];
                    for to in t0..t1 {
                        let ti = to + dt - pt;
                        for yo in y0..y1 {
                            let yi = yo + dy - ph;
                            let dst_row = (ti * h + yi) * w;
                            let src_base = (to * od[1] + yo) * od[2];
                            for (d, &v) in xc[dst_row + x0 + dx - pw..dst_row + x1 + dx - pw]
                                .iter_mut()
                                .zip(&src[src_base + x0..src_base + x1])
                            {
                                *d += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    x
}

fn depthwise_forward<T: Scalar>(x: &[T], dims: [usize; 4], w: &[T], geom: ConvGeom, od: [usize; 3], out: &mut [T]) {
    let [c, d, h, wd] = dims;
    let [kt, kh, kw] = geom.kernel;
    let [pt, ph, pw] = geom.pad;
    let kv = geom.volume();
    let n = od[0] * od[1] * od[2];
    for ci in 0..c {
        let xc = &x[ci * d * h * wd..(ci + 1) * d * h * wd];
        let oc = &mut out[ci * n..(ci + 1) * n];
        let mut tap = 0;
        for dt in 0..kt {
            let (t0, t1) = valid_range(od[0], d, dt, pt);
            for dy in 0..kh {
                let (y0, y1) = valid_range(od[1], h, dy, ph);
                for dx in 0..kw {
                    let (x0, x1) = valid_range(od[2], wd, dx, pw);
                    let k = w[ci * kv + tap];
                    for to in t0..t1 {
                        let ti = to + dt - pt;
                        for yo in y0..y1 {
                            let yi = yo + dy - ph;
                            let sr = (ti * h + yi) * wd;
                            let db = (to * od[1] + yo) * od[2];
                            for (o, &v) in
                                oc[db + x0..db + x1].iter_mut().zip(&xc[sr + x0 + dx - pw..sr + x1 + dx - pw])
                            {
                                *o += k * v;
                            }
                        }
                    }
                    tap += 1;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<T: Scalar>(
    x: &[T],
    dims: [usize; 4],
    w: &[T],
    geom: ConvGeom,
    od: [usize; 3],
    g: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let [c, d, h, wd] = dims;
    let [kt, kh, kw] = geom.kernel;
    let [pt, ph, pw] = geom.pad;
    let kv = geom.volume();
    let n = od[0] * od[1] * od[2];
    let mut dx = vec![T::zero(); if want_dx { x.len() } else { 0 }];
    let mut dw = vec![T::zero(); if want_dw { w.len() } else { 0 }];
    for ci in 0..c {
        let span = ci * d * h * wd..(ci + 1) * d * h * wd;
        let xc = &x[span.clone()];
        let gc = &g[ci * n..(ci + 1) * n];
        let mut tap = 0;
        for dt in 0..kt {
            let (t0, t1) = valid_range(od[0], d, dt, pt);
            for dy in 0..kh {
                let (y0, y1) = valid_range(od[1], h, dy, ph);
                for dx_ in 0..kw {
                    let (x0, x1) = valid_range(od[2], wd, dx_, pw);
                    let k = w[ci * kv + tap];
                    let mut acc = T::zero();
                    for to in t0..t1 {
                        let ti = to + dt - pt;
                        for yo in y0..y1 {
                            let yi = yo + dy - ph;
                            let sr = (ti * h + yi) * wd;
                            let db = (to * od[1] + yo) * od[2];
                            for xo in x0..x1 {
                                let gv = gc[db + xo];
                                let xi = sr + xo + dx_ - pw;
                                acc += gv * xc[xi];
                                if want_dx {
                                    dx[span.start + xi] += gv * k;
                                }
                            }
                        }
                    }
                    if want_dw {
                        dw[ci * kv + tap] += acc;
                    }
                    tap += 1;
                }
            }
        }
    }
    (want_dx.then_some(dx), want_dw.then_some(dw))
}

fn pad4(shape: &[usize]) -> Result<[usize; 4]> {
    if shape.len() > 4 {
        return Err(Error::Shape(format!("broadcast supports rank <= 4, got {shape:?}")));
    }
    let mut out = [1; 4];
    out[4 - shape.len()..].copy_from_slice(shape);
    Ok(out)
}

/// Strides over an operand padded to rank 4, zero along broadcast axes.
fn bcast_strides(s: [usize; 4]) -> [usize; 4] {
    let mut st = [0; 4];
    let mut acc = 1;
    for i in (0..4).rev() {
        st[i] = if s[i] == 1 { 0 } else { acc };
        acc *= s[i];
    }
    st
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, [usize; 4], [usize; 4])> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("rank mismatch {a:?} vs {b:?}")));
    }
    let mut out = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}")));
        }
    }
    Ok((out, pad4(a)?, pad4(b)?))
}

fn for_each_bcast(out4: [usize; 4], sa: [usize; 4], sb: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let mut o = 0;
    for i0 in 0..out4[0] {
        for i1 in 0..out4[1] {
            for i2 in 0..out4[2] {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..out4[3] {
                    f(o, ba + i3 * sa[3], bb + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

fn broadcast_binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return Ok(a.zip_map(b, f));
    }
    let (shape, a4, b4) = broadcast_shape(a.shape(), b.shape())?;
    let out4 = pad4(&shape)?;
    let (sa, sb) = (bcast_strides(a4), bcast_strides(b4));
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); shape.iter().product()];
    for_each_bcast(out4, sa, sb, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
    Tensor::from_vec(&shape, out)
}

/// Sums `g` down to `shape` along broadcast axes.
fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let out4 = pad4(g.shape())?;
    let st = bcast_strides(pad4(shape)?);
    let mut out = vec![T::zero(); shape.iter().product()];
    let gd = g.data();
    for_each_bcast(out4, st, st, |o, i, _| out[i] += gd[o]);
    Tensor::from_vec(shape, out)
}

/// `reduce_to(g * other)` without materializing the product.
fn mul_reduce<T: Scalar>(g: &Tensor<T>, other: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if g.shape() == shape && other.shape() == shape {
        return Ok(g.zip_map(other, |a, b| a * b));
    }
    let out4 = pad4(g.shape())?;
    let st = bcast_strides(pad4(shape)?);
    let so = bcast_strides(pad4(other.shape())?);
    let mut out = vec![T::zero(); shape.iter().product()];
    let (gd, od) = (g.data(), other.data());
    for_each_bcast(out4, st, so, |o, i, j| out[i] += gd[o] * od[j]);
    Tensor::from_vec(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(out * probe))/d(input) against central differences.
    fn check_grad(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let out = build(&mut g, &ids);
        let probe = rand_tensor(g.shape(out), &mut rng);
        let grads = g.backward(vec![(out, probe.clone())]).unwrap();
        let eval = |vals: &[Tensor<f64>]| -> f64 {
            let mut g2 = Graph::new();
            let ids: Vec<NodeId> = vals.iter().map(|t| g2.input(t.clone())).collect();
            let o = build(&mut g2, &ids);
            g2.value(o).zip_map(&probe, |a, b| a * b).sum()
        };
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let an = grads.get(ids[k]).expect("grad present");
            for i in 0..t.numel() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = an.data()[i];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                assert!(err < 1e-5, "input {k} elem {i}: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn conv3d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[2, 3, 4, 3], &mut rng);
        let w = rand_tensor(&[3, 2 * 27], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        check_grad(vec![x, w, b], |g, ids| g.conv3d(ids[0], ids[1], Some(ids[2]), ConvGeom::same([3, 3, 3])).unwrap());
    }

    #[test]
    fn temporal_conv_and_pointwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[3, 5, 1, 1], &mut rng);
        let w = rand_tensor(&[1, 3 * 3], &mut rng);
        check_grad(vec![x, w], |g, ids| g.conv3d(ids[0], ids[1], None, ConvGeom::same([3, 1, 1])).unwrap());
        let x = rand_tensor(&[4, 2, 2, 2], &mut rng);
        let w = rand_tensor(&[3, 4], &mut rng);
        check_grad(vec![x, w], |g, ids| g.conv3d(ids[0], ids[1], None, ConvGeom::pointwise()).unwrap());
    }

    #[test]
    fn conv3d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[2, 3, 3, 4], &mut rng);
        let w = rand_tensor(&[2, 2 * 27], &mut rng);
        let mut g = Graph::new();
        let (xi, wi) = (g.input(x.clone()), g.input(w.clone()));
        let o = g.conv3d(xi, wi, None, ConvGeom::same([3, 3, 3])).unwrap();
        let out = g.value(o);
        let [_, d, h, wd] = x.dims4();
        let at = |c: usize, t: isize, y: isize, xx: isize| -> f64 {
            if t < 0 || y < 0 || xx < 0 || t >= d as isize || y >= h as isize || xx >= wd as isize {
                0.0
            } else {
                x.data()[((c * d + t as usize) * h + y as usize) * wd + xx as usize]
            }
        };
        for co in 0..2 {
            for t in 0..d {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut s = 0.0;
                        for ci in 0..2 {
                            for kt in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let wv = w.data()[co * 54 + ci * 27 + kt * 9 + ky * 3 + kx];
                                        s += wv
                                            * at(
                                                ci,
                                                t as isize + kt as isize - 1,
                                                y as isize + ky as isize - 1,
                                                xx as isize + kx as isize - 1,
                                            );
                                    }
                                }
                            }
                        }
                        let got = out.data()[((co * d + t) * h + y) * wd + xx];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn depthwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[3, 3, 2, 3], &mut rng);
        let w = rand_tensor(&[3, 27], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        check_grad(vec![x, w, b], |g, ids| {
            g.depthwise_conv3d(ids[0], ids[1], Some(ids[2]), ConvGeom::same([3, 3, 3])).unwrap()
        });
    }

    #[test]
    fn group_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[4, 2, 2, 3], &mut rng);
        let ga = rand_tensor(&[4], &mut rng);
        let be = rand_tensor(&[4], &mut rng);
        check_grad(vec![x, ga, be], |g, ids| g.group_norm(ids[0], ids[1], ids[2], 2).unwrap());
    }

    #[test]
    fn broadcast_and_elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&[3, 2, 2, 2], &mut rng);
        let b = rand_tensor(&[1, 2, 2, 2], &mut rng);
        let c = rand_tensor(&[3, 1, 1, 1], &mut rng);
        let d = rand_tensor(&[1, 2, 1, 1], &mut rng);
        check_grad(vec![a, b, c, d], |g, ids| {
            let m = g.mul(ids[0], ids[1]).unwrap();
            let s = g.silu(m);
            let a2 = g.add(s, ids[2]).unwrap();
            let m2 = g.mul(ids[3], a2).unwrap();
            g.sigmoid(m2)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&[2, 2, 2, 2], &mut rng);
        let b = rand_tensor(&[3, 2, 4, 4], &mut rng);
        check_grad(vec![a, b], |g, ids| {
            let u = g.upsample2x(ids[0]).unwrap();
            let c = g.concat(u, ids[1]).unwrap();
            let ms = g.mean_spatial(c).unwrap();
            let mv = g.mean_volume(c).unwrap();
            let s = g.add(ms, mv).unwrap();
            let s = g.scale(s, 1.5);
            g.add(c, s).unwrap()
        });
        let x = rand_tensor(&[2, 3, 4, 4], &mut rng);
        check_grad(vec![x], |g, ids| g.patchify(ids[0], 2).unwrap());
        let p = rand_tensor(&[3, 2], &mut rng);
        let q = rand_tensor(&[2, 4], &mut rng);
        check_grad(vec![p, q], |g, ids| {
            let m = g.matmul(ids[0], ids[1]).unwrap();
            g.reshape(m, &[12]).unwrap()
        });
    }

    #[test]
    fn patchify_layout() {
        // one frame, one channel, 2x2 patch on a 2x4 image -> 4 channels, 1x2 grid
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 4], (0..8).map(|v| v as f64).collect()).unwrap();
        let mut g = Graph::new();
        let xi = g.input(x);
        let p = g.patchify(xi, 2).unwrap();
        assert_eq!(g.shape(p), &[4, 1, 1, 2]);
        assert_eq!(g.value(p).data(), &[0.0, 2.0, 1.0, 3.0, 4.0, 6.0, 5.0, 7.0]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::full(&[1, 1, 1, 2], 2.0));
        let b = g.input_with_grad(Tensor::full(&[1, 1, 1, 2], 3.0));
        let m = g.mul(a, b).unwrap();
        let grads = g.backward(vec![(m, Tensor::full(&[1, 1, 1, 2], 1.0))]).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn upsample_to_rejects_non_doubling() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(g.upsample_to(a, 4, 4).is_err());
        let b = g.input(Tensor::zeros(&[1, 1, 2, 2]));
        let u = g.upsample_to(b, 8, 8).unwrap();
        assert_eq!(g.shape(u), &[1, 1, 8, 8]);
    }
}
