//! Named parameter storage, initialisation and the basic layers built on the
//! autograd graph.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

pub type ParamId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    Bias,
    NormGain,
    NormBias,
    PosEmbedding,
}

impl ParamKind {
    /// Weight tensors that post-training quantization converts to int8.
    pub fn is_quantizable(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::LinearWeight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Parameters keyed by stable hierarchical names such as
/// `local.block2.expand.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, kind: ParamKind, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, kind, value });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.entries[i].value)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Rounds every value through `f32`, the on-disk precision.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            for v in e.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Copies values by name from `other`; both stores must hold the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> crate::Result<()> {
        let missing: Vec<String> = self
            .names()
            .filter(|n| other.id(n).is_none())
            .map(String::from)
            .collect();
        let extra: Vec<String> = other
            .names()
            .filter(|n| self.id(n).is_none())
            .map(String::from)
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(crate::Error::Incompatible { missing, extra });
        }
        for e in &mut self.entries {
            let src = other.by_name(&e.name).expect("checked above");
            if src.shape() != e.value.shape() {
                return Err(crate::Error::Shape(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name,
                    src.shape(),
                    e.value.shape()
                )));
            }
            e.value = src.clone();
        }
        Ok(())
    }
}

/// Hands out scoped parameter names and draws initial values.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        Builder {
            prefix: self.qualify(name),
            store: &mut *self.store,
            rng: &mut *self.rng,
        }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// He-uniform draw scaled by the receptive-field fan-in.
    pub fn conv_weight(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound));
        self.store.add(self.qualify(name), ParamKind::ConvWeight, t)
    }

    /// Truncated normal with standard deviation 0.02, cut at two deviations.
    pub fn linear_weight(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let t = Tensor::from_fn(shape, |_| loop {
            let v: f64 = normal.sample(self.rng);
            if v.abs() <= 0.04 {
                break v;
            }
        });
        self.store.add(self.qualify(name), ParamKind::LinearWeight, t)
    }

    pub fn constant(&mut self, name: &str, kind: ParamKind, shape: &[usize], value: f64) -> ParamId {
        self.store.add(self.qualify(name), kind, Tensor::full(shape, value))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let mut s = b.scope(name);
        let weight = s.conv_weight("weight", &[cout, cin, k, k]);
        let bias = Some(s.constant("bias", ParamKind::Bias, &[cout], 0.0));
        Conv2d {
            weight,
            bias,
            stride,
            pad: (k - 1) / 2,
        }
    }

    /// Convolution without bias, for use in front of a normalisation layer.
    pub fn without_bias(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let mut s = b.scope(name);
        Conv2d {
            weight: s.conv_weight("weight", &[cout, cin, k, k]),
            bias: None,
            stride,
            pad: (k - 1) / 2,
        }
    }

    /// Non-overlapping `k×k` patch convolution (stride `k`, no padding).
    pub fn patchify(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let mut c = Self::new(b, name, cin, cout, k, k);
        c.pad = 0;
        c
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, din: usize, dout: usize) -> Self {
        let mut s = b.scope(name);
        Linear {
            weight: s.linear_weight("weight", &[dout, din]),
            bias: s.constant("bias", ParamKind::Bias, &[dout], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        let mut s = b.scope(name);
        GroupNorm {
            gamma: s.constant("gamma", ParamKind::NormGain, &[channels], 1.0),
            beta: s.constant("beta", ParamKind::NormBias, &[channels], 0.0),
            groups: default_groups(channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// Largest of 4, 2, 1 that divides the channel count.
fn default_groups(c: usize) -> usize {
    [4, 2, 1].into_iter().find(|g| c % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        let mut s = b.scope(name);
        LayerNorm {
            gamma: s.constant("gamma", ParamKind::NormGain, &[dim], 1.0),
            beta: s.constant("beta", ParamKind::NormBias, &[dim], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Convolution, group normalisation and an optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: GroupNorm,
    pub act: bool,
}

impl ConvNormAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize, act: bool) -> Self {
        let mut s = b.scope(name);
        ConvNormAct {
            conv: Conv2d::without_bias(&mut s, "conv", cin, cout, k, stride),
            norm: GroupNorm::new(&mut s, "norm", cout),
            act,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.conv.forward(g, x);
        let y = self.norm.forward(g, y);
        if self.act {
            g.relu(y)
        } else {
            y
        }
    }
}
