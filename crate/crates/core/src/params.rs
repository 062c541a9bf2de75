//! Named parameter storage with per-parameter trainability.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the model a parameter belongs to; drives stage-wise freezing
/// and per-group learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Pretrained extractor weights. Never updated by the trainer.
    Backbone,
    /// Low-rank adapter factors inserted into the extractor.
    Lora,
    /// Expert decoder weights, including the center-bias prior.
    Decoder,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Lora => "lora",
            ParamGroup::Decoder => "decoder",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "backbone" => Some(ParamGroup::Backbone),
            "lora" => Some(ParamGroup::Lora),
            "decoder" => Some(ParamGroup::Decoder),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
    pub trainable: bool,
}

/// Initialization schemes used by the layers.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
    /// Gaussian with std `gain / sqrt(fan_in)`.
    FanIn {
        fan_in: usize,
        gain: f64,
    },
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, group: ParamGroup) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::State(format!("parameter {name:?} registered twice")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, group, trainable: group != ParamGroup::Backbone });
        Ok(id)
    }

    pub fn create<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<ParamId> {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Const(c) => Tensor::full(shape, T::lit(c)),
            Init::Normal(std) => gaussian(shape, std, rng),
            Init::FanIn { fan_in, gain } => gaussian(shape, gain / (fan_in.max(1) as f64).sqrt(), rng),
        };
        self.insert(name, value, group)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Total trainable scalar count, optionally restricted to one group.
    pub fn trainable_count(&self, group: Option<ParamGroup>) -> usize {
        self.params.iter().filter(|p| p.trainable && group.is_none_or(|g| p.group == g)).map(|p| p.value.numel()).sum()
    }

    pub fn group_count(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.numel()).sum()
    }

    /// Snapshot of every tensor in a group, in registration order.
    pub fn snapshot(&self, group: ParamGroup) -> Vec<(String, Tensor<T>)> {
        self.params.iter().filter(|p| p.group == group).map(|p| (p.name.clone(), p.value.clone())).collect()
    }
}

fn gaussian<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, std.max(0.0)).expect("finite std");
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}
