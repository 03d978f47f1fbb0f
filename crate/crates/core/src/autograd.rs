//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Feature maps are
//! `C×H×W` tensors, token matrices are `N×D`. Parameters are pulled from a
//! [`ParamStore`] on first use and their gradients are collected by
//! [`Graph::backward`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Activation observation hook used by post-training quantization.
#[derive(Clone, Debug)]
pub enum Observer {
    /// Track the running min/max of each tapped activation.
    Record(BTreeMap<String, (f64, f64)>),
    /// Fake-quantize each tapped activation to 8 bits over the stored range.
    Apply(BTreeMap<String, (f64, f64)>),
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConstMul(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    Resize(Var),
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ChannelMean(Var),
    ChannelSum(Var),
    SumChannels(Var),
    ScaleChannels(Var, Var),
    MulSpatial(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxChannels(Var),
    LogSoftmaxChannels(Var),
    ColSlice {
        x: Var,
        start: usize,
    },
    ColConcat(Vec<Var>),
    Straight(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    pub training: bool,
    pub observer: Option<Observer>,
    /// Source of dropout masks; dropout is the identity when absent.
    pub rng: Option<ChaCha8Rng>,
}

/// Gradients of a scalar root with respect to parameters and differentiable inputs.
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    vars: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.vars.get(&v.0)
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.params
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            params: HashMap::new(),
            training: false,
            observer: None,
            rng: None,
        }
    }

    /// A graph with no parameters, for evaluating pure tensor expressions.
    pub fn detached() -> Graph<'static> {
        Graph {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
            training: false,
            observer: None,
            rng: None,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Passes an activation through the quantization observer, if any.
    pub fn tap(&mut self, name: &str, v: Var) -> Var {
        match &mut self.observer {
            None => v,
            Some(Observer::Record(ranges)) => {
                let t = &self.nodes[v.0].value;
                let (lo, hi) = t
                    .data()
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
                        (a.min(x), b.max(x))
                    });
                let e = ranges.entry(name.to_string()).or_insert((lo, hi));
                e.0 = e.0.min(lo);
                e.1 = e.1.max(hi);
                v
            }
            Some(Observer::Apply(ranges)) => {
                let Some(&(lo, hi)) = ranges.get(name) else {
                    return v;
                };
                let q = fake_quant_u8(&self.nodes[v.0].value, lo, hi);
                let ng = self.nodes[v.0].needs_grad;
                self.push(q, Op::Straight(v), ng)
            }
        }
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x / y);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x * k);
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let ng = self.ng(&[a]);
        self.push(t, Op::AddScalar(a), ng)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn const_mul(&mut self, a: Var, c: &Tensor) -> Var {
        assert_eq!(self.shape(a), c.shape());
        let t = Tensor::new(
            c.shape().to_vec(),
            self.value(a).data().iter().zip(c.data()).map(|(x, y)| x * y).collect(),
        );
        let ng = self.ng(&[a]);
        self.push(t, Op::ConstMul(a, c.data().to_vec()), ng)
    }

    /// Inverted dropout with drop probability `p`, active only while training.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return a;
        }
        let Some(rng) = self.rng.as_mut() else { return a };
        let keep = 1.0 / (1.0 - p);
        let shape = self.nodes[a.0].value.shape().to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
        self.const_mul(a, &mask)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(&[a]);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let ng = self.ng(&[a]);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| gelu(x).0);
        let ng = self.ng(&[a]);
        self.push(t, Op::Gelu(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        let ng = self.ng(&[a]);
        self.push(t, Op::Log(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        let ng = self.ng(&[a]);
        self.push(t, Op::Abs(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(&[a]);
        self.push(t, Op::Clamp(a, lo, hi), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    // ---- convolution and resampling ----------------------------------------

    /// 2D convolution of a `C×H×W` map with an `O×C×k×k` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = self.value(x).dims3();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be O×C×k×k");
        assert_eq!(ws[1], c, "conv input channels {c} != weight channels {}", ws[1]);
        let (o, k) = (ws[0], ws[2]);
        let (ho, wo) = conv_out(h, wd, k, stride, pad);
        let mut out = vec![0.0; o * ho * wo];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (oc, chunk) in out.chunks_mut(ho * wo).enumerate() {
                chunk.fill(bias[oc]);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        let wdata = self.value(w).data();
        if k == 1 && stride == 1 && pad == 0 {
            gemm(o, c, ho * wo, wdata, false, self.value(x).data(), false, &mut out, beta);
        } else {
            let cols = im2col(self.value(x).data(), c, h, wd, k, stride, pad);
            gemm(o, c * k * k, ho * wo, wdata, false, &cols, false, &mut out, beta);
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(
            Tensor::new(vec![o, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        )
    }

    /// 2×2 max pooling with stride 2 (floor on odd sizes).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut best = usize::MAX;
                    let mut bv = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = ch * h * w + (2 * y + dy) * w + 2 * xx + dx;
                            if src[i] > bv || best == usize::MAX {
                                bv = src[i];
                                best = i;
                            }
                        }
                    }
                    out.push(bv);
                    argmax.push(best);
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![c, ho, wo], out), Op::MaxPool2 { x, argmax }, ng)
    }

    /// k×k average pooling with stride k (floor on non-divisible sizes).
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let (ho, wo) = (h / k, w / k);
        let src = self.value(x).data();
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho * k {
                for xx in 0..wo * k {
                    out[ch * ho * wo + (y / k) * wo + xx / k] += src[ch * h * w + y * w + xx] * inv;
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![c, ho, wo], out), Op::AvgPool { x, k }, ng)
    }

    /// Bilinear resampling to `oh×ow` with half-pixel centres and edge clamping.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (c, h, w) = self.value(x).dims3();
        if (h, w) == (oh, ow) {
            return x;
        }
        let rows = bilinear_taps(h, oh);
        let cols = bilinear_taps(w, ow);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let s = &src[ch * h * w..(ch + 1) * h * w];
            for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
                for (xx, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let top = s[y0 * w + x0] * (1.0 - fx) + s[y0 * w + x1] * fx;
                    let bot = s[y1 * w + x0] * (1.0 - fx) + s[y1 * w + x1] * fx;
                    out[ch * oh * ow + y * ow + xx] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![c, oh, ow], out), Op::Resize(x), ng)
    }

    // ---- structural ---------------------------------------------------------

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        if xs.len() == 1 {
            return xs[0];
        }
        let tail = self.shape(xs[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &v in xs {
            let t = self.value(v);
            assert_eq!(&t.shape()[1..], &tail[..], "concat trailing shape mismatch");
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let ng = self.ng(xs);
        self.push(Tensor::new(shape, data), Op::Concat(xs.to_vec()), ng)
    }

    /// Slice `[start, start+len)` of the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert!(start + len <= t.shape()[0]);
        let inner: usize = t.shape()[1..].iter().product();
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let ng = self.ng(&[x]);
        self.push(Tensor::new(shape, data), Op::Narrow { x, start }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let ng = self.ng(&[x]);
        self.push(t, Op::Reshape(x), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).dims2();
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![c, r], out), Op::Transpose(x), ng)
    }

    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.value(x).dims2();
        assert!(start + len <= c);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![r, len], out), Op::ColSlice { x, start }, ng)
    }

    pub fn col_concat(&mut self, xs: &[Var]) -> Var {
        let r = self.value(xs[0]).dims2().0;
        let widths: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let (rr, c) = self.value(v).dims2();
                assert_eq!(rr, r);
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&v, &c) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[i * c..(i + 1) * c]);
            }
        }
        let ng = self.ng(xs);
        self.push(Tensor::new(vec![r, total], out), Op::ColConcat(xs.to_vec()), ng)
    }

    // ---- normalisation and channel ops --------------------------------------

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert!(groups >= 1 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let m = (c / groups) * h * w;
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(groups);
        for gi in 0..groups {
            let range = gi * m..(gi + 1) * m;
            let seg = &src[range.clone()];
            let mu = seg.iter().sum::<f64>() / m as f64;
            let var = seg.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + NORM_EPS).sqrt();
            rstd.push(r);
            for (o, &v) in xhat[range].iter_mut().zip(seg) {
                *o = (v - mu) * r;
            }
        }
        let hw = h * w;
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i / hw] + b[i / hw])
            .collect();
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            Tensor::new(vec![c, h, w], out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Per-row layer normalisation of an `N×D` matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, d) = self.value(x).dims2();
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = Vec::with_capacity(n);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + NORM_EPS).sqrt();
            rstd.push(r);
            for j in 0..d {
                let xh = (row[j] - mu) * r;
                xhat[i * d + j] = xh;
                out[i * d + j] = xh * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            Tensor::new(vec![n, d], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Per-channel spatial mean of a `C×H×W` map, shape `[C]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.shape()[0];
        let inner = t.len() / c;
        let out: Vec<f64> = t
            .data()
            .chunks(inner)
            .map(|s| s.iter().sum::<f64>() / inner as f64)
            .collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![c], out), Op::ChannelMean(x), ng)
    }

    /// Per-channel spatial sum, shape `[C]`.
    pub fn channel_sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.shape()[0];
        let inner = t.len() / c;
        let out: Vec<f64> = t.data().chunks(inner).map(|s| s.iter().sum()).collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![c], out), Op::ChannelSum(x), ng)
    }

    /// Sum across channels, `C×H×W → 1×H×W`.
    pub fn sum_channels(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let src = self.value(x).data();
        let mut out = vec![0.0; h * w];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(&src[ch * h * w..(ch + 1) * h * w]) {
                *o += v;
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![1, h, w], out), Op::SumChannels(x), ng)
    }

    /// `out[c,…] = x[c,…] · s[c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Var {
        let t = self.value(x);
        let c = t.shape()[0];
        let sv = self.value(s).data();
        assert_eq!(sv.len(), c, "channel weight length mismatch");
        let inner = t.len() / c;
        let out: Vec<f64> = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv[i / inner])
            .collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(&[x, s]);
        self.push(Tensor::new(shape, out), Op::ScaleChannels(x, s), ng)
    }

    /// Multiplies every channel of `x` (C×H×W) by the single-channel map `a` (1×H×W).
    pub fn mul_spatial(&mut self, x: Var, a: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert_eq!(self.shape(a), &[1, h, w], "spatial gate shape mismatch");
        let av = self.value(a).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * av[i % (h * w)])
            .collect();
        let ng = self.ng(&[x, a]);
        self.push(Tensor::new(vec![c, h, w], out), Op::MulSpatial(x, a), ng)
    }

    // ---- dense algebra -------------------------------------------------------

    /// `x·wᵀ + b` for `x: N×Din`, `w: Dout×Din`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, din) = self.value(x).dims2();
        let (dout, wd) = self.value(w).dims2();
        assert_eq!(din, wd, "linear input width mismatch");
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(n, din, dout, self.value(x).data(), false, self.value(w).data(), true, &mut out, beta);
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(Tensor::new(vec![n, dout], out), Op::Linear { x, w, b }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.value(a).dims2();
        let (k2, m) = self.value(b).dims2();
        assert_eq!(k, k2);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(vec![n, m], out), Op::MatMul(a, b), ng)
    }

    /// `a·bᵀ` for `a: N×K`, `b: M×K`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.value(a).dims2();
        let (m, k2) = self.value(b).dims2();
        assert_eq!(k, k2);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(vec![n, m], out), Op::MatMulT(a, b), ng)
    }

    /// Softmax along the last axis of an `N×M` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (n, m) = self.value(x).dims2();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            softmax_in_place(row);
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![n, m], out), Op::SoftmaxRows(x), ng)
    }

    /// Per-pixel softmax across the channels of a `K×H×W` map.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let out = softmax_channels(self.value(x));
        let ng = self.ng(&[x]);
        self.push(out, Op::SoftmaxChannels(x), ng)
    }

    pub fn log_softmax_channels(&mut self, x: Var) -> Var {
        let (k, h, w) = self.value(x).dims3();
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; k * hw];
        for p in 0..hw {
            let mx = (0..k).map(|c| src[c * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..k).map(|c| (src[c * hw + p] - mx).exp()).sum::<f64>().ln();
            for c in 0..k {
                out[c * hw + p] = src[c * hw + p] - lse;
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![k, h, w], out), Op::LogSoftmaxChannels(x), ng)
    }

    // ---- reverse pass --------------------------------------------------------

    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        let mut leaf_grads = HashMap::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.insert(i, g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        let mut params = HashMap::new();
        for (&id, &v) in &self.params {
            if let Some(g) = leaf_grads.remove(&v.0) {
                params.insert(id, g);
            }
        }
        Gradients {
            params,
            vars: leaf_grads,
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        let shape = self.shape(v).to_vec();
        self.acc(grads, v, Tensor::new(shape, data));
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let y = node.value.data();
        let map_in = |f: &dyn Fn(usize, f64) -> f64| -> Vec<f64> {
            gd.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.acc_data(grads, *a, map_in(&|i, gi| gi * bv[i]));
                }
                if self.wants(*b) {
                    self.acc_data(grads, *b, map_in(&|i, gi| gi * av[i]));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.acc_data(grads, *a, map_in(&|i, gi| gi / bv[i]));
                }
                if self.wants(*b) {
                    self.acc_data(grads, *b, map_in(&|i, gi| -gi * av[i] / (bv[i] * bv[i])));
                }
            }
            Op::Scale(a, k) => self.acc(grads, *a, g.map(|v| v * k)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::ConstMul(a, c) => self.acc_data(grads, *a, map_in(&|i, gi| gi * c[i])),
            Op::Relu(a) => self.acc_data(grads, *a, map_in(&|i, gi| if y[i] > 0.0 { gi } else { 0.0 })),
            Op::Sigmoid(a) => self.acc_data(grads, *a, map_in(&|i, gi| gi * y[i] * (1.0 - y[i]))),
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.acc_data(grads, *a, map_in(&|i, gi| gi * gelu(x[i]).1))
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.acc_data(grads, *a, map_in(&|i, gi| gi / x[i]))
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                self.acc_data(grads, *a, map_in(&|i, gi| if x[i] > 0.0 { gi } else if x[i] < 0.0 { -gi } else { 0.0 }))
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                self.acc_data(grads, *a, map_in(&|i, gi| if x[i] > *lo && x[i] < *hi { gi } else { 0.0 }))
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc_data(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.acc_data(grads, *a, vec![gd[0] / n as f64; n]);
            }
            Op::Straight(a) => self.acc(grads, *a, g.clone()),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv_backward(*x, *w, *b, *stride, *pad, g, grads),
            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (&i, &gi) in argmax.iter().zip(gd) {
                    gx[i] += gi;
                }
                self.acc_data(grads, *x, gx);
            }
            Op::AvgPool { x, k } => {
                let (c, h, w) = self.value(*x).dims3();
                let (ho, wo) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for yy in 0..ho * k {
                        for xx in 0..wo * k {
                            gx[ch * h * w + yy * w + xx] = gd[ch * ho * wo + (yy / k) * wo + xx / k] * inv;
                        }
                    }
                }
                self.acc_data(grads, *x, gx);
            }
            Op::Resize(x) => {
                let (c, h, w) = self.value(*x).dims3();
                let (_, oh, ow) = node.value.dims3();
                let rows = bilinear_taps(h, oh);
                let cols = bilinear_taps(w, ow);
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
                    for (yy, &(y0, y1, fy)) in rows.iter().enumerate() {
                        for (xx, &(x0, x1, fx)) in cols.iter().enumerate() {
                            let gi = gd[ch * oh * ow + yy * ow + xx];
                            dst[y0 * w + x0] += gi * (1.0 - fy) * (1.0 - fx);
                            dst[y0 * w + x1] += gi * (1.0 - fy) * fx;
                            dst[y1 * w + x0] += gi * fy * (1.0 - fx);
                            dst[y1 * w + x1] += gi * fy * fx;
                        }
                    }
                }
                self.acc_data(grads, *x, gx);
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).len();
                    if self.wants(v) {
                        self.acc_data(grads, v, gd[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::Narrow { x, start } => {
                let t = self.value(*x);
                let inner: usize = t.shape()[1..].iter().product();
                let mut gx = vec![0.0; t.len()];
                gx[start * inner..start * inner + gd.len()].copy_from_slice(gd);
                self.acc_data(grads, *x, gx);
            }
            Op::Reshape(x) => self.acc_data(grads, *x, gd.to_vec()),
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = gd[j * r + i];
                    }
                }
                self.acc_data(grads, *x, gx);
            }
            Op::ColSlice { x, start } => {
                let (r, c) = self.value(*x).dims2();
                let len = node.value.dims2().1;
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                self.acc_data(grads, *x, gx);
            }
            Op::ColConcat(xs) => {
                let (r, total) = node.value.dims2();
                let mut off = 0;
                for &v in xs {
                    let c = self.value(v).dims2().1;
                    if self.wants(v) {
                        let mut gx = Vec::with_capacity(r * c);
                        for i in 0..r {
                            gx.extend_from_slice(&gd[i * total + off..i * total + off + c]);
                        }
                        self.acc_data(grads, v, gx);
                    }
                    off += c;
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let (c, h, w) = self.value(*x).dims3();
                let hw = h * w;
                let gam = self.value(*gamma).data();
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for i in 0..gd.len() {
                    gg[i / hw] += gd[i] * xhat[i];
                    gb[i / hw] += gd[i];
                }
                if self.wants(*x) {
                    let m = (c / groups) * hw;
                    let mut gx = vec![0.0; c * hw];
                    for gi in 0..*groups {
                        let range = gi * m..(gi + 1) * m;
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for i in range.clone() {
                            let gxh = gd[i] * gam[i / hw];
                            s1 += gxh;
                            s2 += gxh * xhat[i];
                        }
                        let r = rstd[gi] / m as f64;
                        for i in range {
                            let gxh = gd[i] * gam[i / hw];
                            gx[i] = r * (m as f64 * gxh - s1 - xhat[i] * s2);
                        }
                    }
                    self.acc_data(grads, *x, gx);
                }
                self.acc_data(grads, *gamma, gg);
                self.acc_data(grads, *beta, gb);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = self.value(*x).dims2();
                let gam = self.value(*gamma).data();
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut gx = vec![0.0; n * d];
                for i in 0..n {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..d {
                        let k = i * d + j;
                        gg[j] += gd[k] * xhat[k];
                        gb[j] += gd[k];
                        let gxh = gd[k] * gam[j];
                        s1 += gxh;
                        s2 += gxh * xhat[k];
                    }
                    let r = rstd[i] / d as f64;
                    for j in 0..d {
                        let k = i * d + j;
                        gx[k] = r * (d as f64 * gd[k] * gam[j] - s1 - xhat[k] * s2);
                    }
                }
                self.acc_data(grads, *x, gx);
                self.acc_data(grads, *gamma, gg);
                self.acc_data(grads, *beta, gb);
            }
            Op::ChannelMean(x) | Op::ChannelSum(x) => {
                let t = self.value(*x);
                let c = t.shape()[0];
                let inner = t.len() / c;
                let k = if matches!(node.op, Op::ChannelMean(_)) { 1.0 / inner as f64 } else { 1.0 };
                let gx = (0..t.len()).map(|i| gd[i / inner] * k).collect();
                self.acc_data(grads, *x, gx);
            }
            Op::SumChannels(x) => {
                let t = self.value(*x);
                let hw = gd.len();
                let gx = (0..t.len()).map(|i| gd[i % hw]).collect();
                self.acc_data(grads, *x, gx);
            }
            Op::ScaleChannels(x, s) => {
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                let inner = xv.len() / sv.len();
                if self.wants(*x) {
                    self.acc_data(grads, *x, map_in(&|i, gi| gi * sv[i / inner]));
                }
                if self.wants(*s) {
                    let mut gs = vec![0.0; sv.len()];
                    for (i, (&gi, &xi)) in gd.iter().zip(xv).enumerate() {
                        gs[i / inner] += gi * xi;
                    }
                    self.acc_data(grads, *s, gs);
                }
            }
            Op::MulSpatial(x, a) => {
                let xv = self.value(*x).data();
                let av = self.value(*a).data();
                let hw = av.len();
                if self.wants(*x) {
                    self.acc_data(grads, *x, map_in(&|i, gi| gi * av[i % hw]));
                }
                if self.wants(*a) {
                    let mut ga = vec![0.0; hw];
                    for (i, (&gi, &xi)) in gd.iter().zip(xv).enumerate() {
                        ga[i % hw] += gi * xi;
                    }
                    self.acc_data(grads, *a, ga);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(*x).dims2();
                let dout = self.value(*w).dims2().0;
                if self.wants(*x) {
                    let mut gx = vec![0.0; n * din];
                    gemm(n, dout, din, gd, false, self.value(*w).data(), false, &mut gx, 0.0);
                    self.acc_data(grads, *x, gx);
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; dout * din];
                    gemm(dout, n, din, gd, true, self.value(*x).data(), false, &mut gw, 0.0);
                    self.acc_data(grads, *w, gw);
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; dout];
                    for row in gd.chunks(dout) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.acc_data(grads, *b, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).dims2();
                let m = self.value(*b).dims2().1;
                if self.wants(*a) {
                    let mut ga = vec![0.0; n * k];
                    gemm(n, m, k, gd, false, self.value(*b).data(), true, &mut ga, 0.0);
                    self.acc_data(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * m];
                    gemm(k, n, m, self.value(*a).data(), true, gd, false, &mut gb, 0.0);
                    self.acc_data(grads, *b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (n, k) = self.value(*a).dims2();
                let m = self.value(*b).dims2().0;
                if self.wants(*a) {
                    let mut ga = vec![0.0; n * k];
                    gemm(n, m, k, gd, false, self.value(*b).data(), false, &mut ga, 0.0);
                    self.acc_data(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; m * k];
                    gemm(m, n, k, gd, true, self.value(*a).data(), false, &mut gb, 0.0);
                    self.acc_data(grads, *b, gb);
                }
            }
            Op::SoftmaxRows(x) => {
                let m = node.value.dims2().1;
                let mut gx = vec![0.0; gd.len()];
                for ((gr, yr), out) in gd.chunks(m).zip(y.chunks(m)).zip(gx.chunks_mut(m)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc_data(grads, *x, gx);
            }
            Op::SoftmaxChannels(x) => {
                let (k, h, w) = node.value.dims3();
                let hw = h * w;
                let mut gx = vec![0.0; gd.len()];
                for p in 0..hw {
                    let dot: f64 = (0..k).map(|c| gd[c * hw + p] * y[c * hw + p]).sum();
                    for c in 0..k {
                        gx[c * hw + p] = y[c * hw + p] * (gd[c * hw + p] - dot);
                    }
                }
                self.acc_data(grads, *x, gx);
            }
            Op::LogSoftmaxChannels(x) => {
                let (k, h, w) = node.value.dims3();
                let hw = h * w;
                let mut gx = vec![0.0; gd.len()];
                for p in 0..hw {
                    let gs: f64 = (0..k).map(|c| gd[c * hw + p]).sum();
                    for c in 0..k {
                        gx[c * hw + p] = gd[c * hw + p] - y[c * hw + p].exp() * gs;
                    }
                }
                self.acc_data(grads, *x, gx);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (c, h, wd) = self.value(x).dims3();
        let ws = self.value(w).shape();
        let (o, k) = (ws[0], ws[2]);
        let (_, ho, wo) = g.dims3();
        let gd = g.data();
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let ckk = c * k * k;
        let cols_owned;
        let cols: &[f64] = if pointwise {
            self.value(x).data()
        } else {
            cols_owned = im2col(self.value(x).data(), c, h, wd, k, stride, pad);
            &cols_owned
        };
        if self.wants(w) {
            let mut gw = vec![0.0; o * ckk];
            gemm(o, ho * wo, ckk, gd, false, cols, true, &mut gw, 0.0);
            self.acc_data(grads, w, gw);
        }
        if let Some(b) = b {
            let gb = gd.chunks(ho * wo).map(|s| s.iter().sum()).collect();
            self.acc_data(grads, b, gb);
        }
        if self.wants(x) {
            let mut gcols = vec![0.0; ckk * ho * wo];
            gemm(ckk, o, ho * wo, self.value(w).data(), true, gd, false, &mut gcols, 0.0);
            let gx = if pointwise {
                gcols
            } else {
                col2im(&gcols, c, h, wd, k, stride, pad)
            };
            self.acc_data(grads, x, gx);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// tanh-approximated GELU and its derivative.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Per-pixel softmax over the leading (class) axis of a `K×H×W` tensor.
pub fn softmax_channels(t: &Tensor) -> Tensor {
    let (k, h, w) = t.dims3();
    let hw = h * w;
    let src = t.data();
    let mut out = vec![0.0; k * hw];
    let mut buf = vec![0.0; k];
    for p in 0..hw {
        for c in 0..k {
            buf[c] = src[c * hw + p];
        }
        softmax_in_place(&mut buf);
        for c in 0..k {
            out[c * hw + p] = buf[c];
        }
    }
    Tensor::new(vec![k, h, w], out)
}

fn fake_quant_u8(t: &Tensor, lo: f64, hi: f64) -> Tensor {
    let lo = lo.min(0.0);
    let hi = hi.max(0.0);
    let range = hi - lo;
    if range <= 0.0 {
        return t.clone();
    }
    let scale = range / 255.0;
    let zero = (-lo / scale).round();
    t.map(|v| {
        let q = ((v / scale).round() + zero).clamp(0.0, 255.0);
        (q - zero) * scale
    })
}

pub(crate) fn conv_out(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    assert!(h + 2 * pad >= k && w + 2 * pad >= k, "conv kernel larger than padded input");
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

/// Source index pairs and interpolation weight for each output coordinate.
pub(crate) fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let (ho, wo) = conv_out(h, w, k, stride, pad);
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[ch * h * w + iy as usize * w..ch * h * w + (iy as usize + 1) * w];
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let (ho, wo) = conv_out(h, w, k, stride, pad);
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ch * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_input_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c, h, wd) = x.dims3();
        let ws = w.shape();
        let (o, k) = (ws[0], ws[2]);
        let (ho, wo) = conv_out(h, wd, k, stride, pad);
        Tensor::from_fn(&[o, ho, wo], |idx| {
            let oc = idx / (ho * wo);
            let oy = (idx / wo) % ho;
            let ox = idx % wo;
            let mut s = 0.0;
            for ch in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            s += x.data()[ch * h * wd + iy as usize * wd + ix as usize]
                                * w.data()[((oc * c + ch) * k + ki) * k + kj];
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let x = rand_tensor(&mut rng, &[3, 7, 6]);
            let w = rand_tensor(&mut rng, &[4, 3, k, k]);
            let mut g = Graph::detached();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let y = g.conv2d(xv, wv, None, stride, pad);
            let want = naive_conv(&x, &w, stride, pad);
            assert_eq!(g.shape(y), want.shape());
            for (a, b) in g.value(y).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_upsample_of_2x2_matches_hand_values() {
        // Half-pixel centres: output samples sit at source coords -0.25 (clamped
        // to 0), 0.25, 0.75 and 1.25 (clamped to 1).
        let mut g = Graph::detached();
        let x = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.resize(x, 4, 4);
        let row = |a: f64, b: f64| [a, 0.75 * a + 0.25 * b, 0.25 * a + 0.75 * b, b];
        let top = row(1.0, 2.0);
        let bot = row(3.0, 4.0);
        let mut want = Vec::new();
        for fy in [0.0, 0.25, 0.75, 1.0] {
            for j in 0..4 {
                want.push(top[j] * (1.0 - fy) + bot[j] * fy);
            }
        }
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn elementwise_and_structural_ops_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[4, 5, 6]);
        let other = rand_tensor(&mut rng, &[4, 5, 6]);
        let r = check_input_gradient(&x, |g, v| {
            let o = g.constant(other.clone());
            let a = g.mul(v, o);
            let b = g.sigmoid(a);
            let c = g.gelu(v);
            let c3 = g.add_scalar(c, 3.0);
            let d = g.div(b, c3);
            let s = g.add(d, c);
            let p = g.max_pool2(s);
            let q = g.resize(p, 7, 5);
            let n = g.narrow(q, 1, 2);
            let cat = g.concat(&[n, q]);
            let gn_g = g.constant(Tensor::from_fn(&[6], |i| 0.5 + i as f64 * 0.1));
            let gn_b = g.constant(Tensor::from_fn(&[6], |i| i as f64 * 0.05));
            let nrm = g.group_norm(cat, gn_g, gn_b, 3);
            let sc = g.sum_channels(nrm);
            let m = g.mul_spatial(nrm, sc);
            let cm = g.channel_mean(m);
            let scl = g.scale_channels(m, cm);
            let l = g.log_softmax_channels(scl);
            let sm = g.softmax_channels(scl);
            let t = g.mul(l, sm);
            g.mean(t)
        });
        assert!(r < 1e-6, "relative error {r}");
    }

    #[test]
    fn dense_ops_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[5, 6]);
        let w = rand_tensor(&mut rng, &[4, 6]);
        let r = check_input_gradient(&x, |g, v| {
            let wv = g.constant(w.clone());
            let bv = g.constant(Tensor::from_fn(&[4], |i| i as f64));
            let gam = g.constant(Tensor::full(&[6], 1.3));
            let bet = g.constant(Tensor::full(&[6], 0.1));
            let ln = g.layer_norm(v, gam, bet);
            let y = g.linear(ln, wv, Some(bv));
            let a = g.col_slice(y, 1, 2);
            let b = g.col_slice(y, 0, 2);
            let s = g.matmul_t(a, b);
            let s = g.softmax_rows(s);
            let o = g.matmul(s, a);
            let t = g.transpose(o);
            let cc = g.col_concat(&[o, b]);
            let z = g.sum(cc);
            let tt = g.sum(t);
            let q = g.mul(z, tt);
            let ab = g.abs(q);
            g.add_scalar(ab, 1.0)
        });
        assert!(r < 1e-6, "relative error {r}");
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2, 7, 7]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        for &(stride, pad) in &[(1, 1), (2, 1), (2, 0)] {
            let r = check_input_gradient(&x, |g, v| {
                let wv = g.constant(w.clone());
                let y = g.conv2d(v, wv, None, stride, pad);
                let a = g.avg_pool(y, 2);
                let sq = g.mul(a, a);
                g.sum(sq)
            });
            assert!(r < 1e-6, "stride {stride} pad {pad}: {r}");
            let r = check_input_gradient(&w, |g, wv| {
                let xv = g.constant(x.clone());
                let y = g.conv2d(xv, wv, None, stride, pad);
                let sq = g.mul(y, y);
                g.sum(sq)
            });
            assert!(r < 1e-6, "weight grad stride {stride} pad {pad}: {r}");
        }
    }
}
