//! Stem convolution and stacked SE-bottleneck residual blocks, each followed
//! by 2×2 max pooling.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::nn::{Builder, Conv2d, ConvNormAct, GroupNorm, Linear};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalConfig {
    /// Output widths of the residual blocks; one max pool follows each.
    pub block_widths: Vec<usize>,
    pub stem_width: usize,
    pub se_reduction: usize,
    /// When false the SE stage is skipped (channel weights fixed at 1).
    pub se_enabled: bool,
}

impl Default for LocalConfig {
    fn default() -> Self {
        LocalConfig {
            block_widths: vec![8, 16, 32, 64, 128],
            stem_width: 8,
            se_reduction: 4,
            se_enabled: true,
        }
    }
}

impl LocalConfig {
    pub fn stride(&self) -> usize {
        1 << self.block_widths.len()
    }

    pub fn validate(&self, input_size: usize) -> Result<()> {
        if self.block_widths.is_empty() || self.block_widths.contains(&0) || self.stem_width == 0 {
            return Err(Error::validation("block_widths", "need ≥ 1 block and nonzero widths"));
        }
        if self.se_reduction == 0 {
            return Err(Error::validation("se_reduction", "must be ≥ 1"));
        }
        if input_size < self.stride() {
            return Err(Error::Shape(format!(
                "input {input_size}×{input_size} is too small for {} poolings; minimum size is {}",
                self.block_widths.len(),
                self.stride()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeBottleNetConfig {
    pub in_channels: usize,
    pub bottleneck_channels: usize,
    pub out_channels: usize,
    pub se_reduction: usize,
}

impl SeBottleNetConfig {
    /// Bottleneck is half the output width, capped by the input width.
    pub fn for_stage(in_channels: usize, out_channels: usize, se_reduction: usize) -> Self {
        SeBottleNetConfig {
            in_channels,
            bottleneck_channels: (out_channels / 2).clamp(1, in_channels),
            out_channels,
            se_reduction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.bottleneck_channels == 0 {
            return Err(Error::validation("channels", "all channel counts must be ≥ 1"));
        }
        if self.bottleneck_channels > self.in_channels {
            return Err(Error::validation(
                "bottleneck_channels",
                format!("{} exceeds in_channels {}", self.bottleneck_channels, self.in_channels),
            ));
        }
        if self.se_reduction == 0 {
            return Err(Error::validation("se_reduction", "must be ≥ 1"));
        }
        Ok(())
    }

    /// Hidden width of the excitation MLP, `floor(C / r)` but at least 1.
    pub fn se_hidden(&self) -> usize {
        (self.out_channels / self.se_reduction).max(1)
    }
}

/// Two-layer excitation MLP `C → C/r → C`.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
}

impl SqueezeExcite {
    pub fn new(b: &mut Builder, name: &str, channels: usize, hidden: usize) -> Self {
        let mut s = b.scope(name);
        SqueezeExcite {
            fc1: Linear::new(&mut s, "fc1", channels, hidden),
            fc2: Linear::new(&mut s, "fc2", hidden, channels),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, u: Var) -> Result<Var> {
        let e = squeeze(g, u);
        let s = excite(g, self, e)?;
        Ok(g.scale_channels(u, s))
    }
}

/// Per-channel spatial mean.
pub fn squeeze(g: &mut Graph, u: Var) -> Var {
    g.channel_mean(u)
}

/// `σ(W₂·relu(W₁·e + b₁) + b₂)`; every weight lies in `(0, 1)`.
pub fn excite(g: &mut Graph, se: &SqueezeExcite, e: Var) -> Result<Var> {
    let c = g.value(e).len();
    if c != se.channels {
        return Err(Error::Shape(format!("{c} channel means for an SE block of width {}", se.channels)));
    }
    let row = g.reshape(e, &[1, c]);
    let h = se.fc1.forward(g, row);
    let h = g.relu(h);
    let h = se.fc2.forward(g, h);
    let s = g.sigmoid(h);
    Ok(g.reshape(s, &[c]))
}

/// `out_c = s_c · u_c`. Channel weights outside `[0, 1]` are rejected.
pub fn scale(g: &mut Graph, u: Var, s: Var) -> Result<Var> {
    let c = g.shape(u)[0];
    let sv = g.value(s);
    if sv.len() != c {
        return Err(Error::Shape(format!("{} channel weights for {c} channels", sv.len())));
    }
    if let Some(v) = sv.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::validation("s", format!("channel weight {v} outside [0, 1]")));
    }
    Ok(g.scale_channels(u, s))
}

/// 1×1 reduce, 3×3, 1×1 expand, squeeze-excitation, then the residual add.
#[derive(Clone, Debug)]
pub struct SeBottleNet {
    pub cfg: SeBottleNetConfig,
    pub reduce: ConvNormAct,
    pub conv: ConvNormAct,
    pub expand: Conv2d,
    pub expand_norm: GroupNorm,
    pub se: Option<SqueezeExcite>,
    pub shortcut: Option<Conv2d>,
    pub bypass_se: bool,
}

impl SeBottleNet {
    pub fn new(b: &mut Builder, name: &str, cfg: SeBottleNetConfig, with_se: bool) -> Result<Self> {
        cfg.validate()?;
        let mut s = b.scope(name);
        let (cin, mid, cout) = (cfg.in_channels, cfg.bottleneck_channels, cfg.out_channels);
        Ok(SeBottleNet {
            cfg,
            reduce: ConvNormAct::new(&mut s, "reduce", cin, mid, 1, 1, true),
            conv: ConvNormAct::new(&mut s, "conv", mid, mid, 3, 1, true),
            expand: Conv2d::without_bias(&mut s, "expand", mid, cout, 1, 1),
            expand_norm: GroupNorm::new(&mut s, "expand_norm", cout),
            se: with_se.then(|| SqueezeExcite::new(&mut s, "se", cout, cfg.se_hidden())),
            shortcut: (cin != cout).then(|| Conv2d::new(&mut s, "shortcut", cin, cout, 1, 1)),
            bypass_se: false,
        })
    }

    /// Residual branch before the SE stage.
    pub fn residual_branch(&self, g: &mut Graph, x: Var) -> Var {
        let f = self.reduce.forward(g, x);
        let f = self.conv.forward(g, f);
        let f = self.expand.forward(g, f);
        self.expand_norm.forward(g, f)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        se_bottlenet_forward(g, self, x)
    }
}

pub fn se_bottlenet_forward(g: &mut Graph, block: &SeBottleNet, x: Var) -> Result<Var> {
    let c = g.shape(x)[0];
    if c != block.cfg.in_channels {
        return Err(Error::Shape(format!("block expects {} channels, got {c}", block.cfg.in_channels)));
    }
    let mut f = block.residual_branch(g, x);
    if let (Some(se), false) = (&block.se, block.bypass_se) {
        f = se.forward(g, f)?;
    }
    let skip = match &block.shortcut {
        Some(p) => p.forward(g, x),
        None => x,
    };
    Ok(g.add(skip, f))
}

#[derive(Clone, Debug)]
pub struct LocalEncoder {
    pub stem: ConvNormAct,
    pub blocks: Vec<SeBottleNet>,
    pub input_size: usize,
}

pub struct LocalOutput {
    pub feature: Var,
    /// Pre-pooling block outputs, shallow to deep.
    pub skips: Vec<Var>,
}

impl LocalEncoder {
    pub fn new(b: &mut Builder, cfg: &LocalConfig, in_channels: usize, input_size: usize) -> Result<Self> {
        cfg.validate(input_size)?;
        let mut s = b.scope("local");
        let stem = ConvNormAct::new(&mut s, "stem", in_channels, cfg.stem_width, 3, 1, true);
        let mut cin = cfg.stem_width;
        let mut blocks = Vec::new();
        for (i, &w) in cfg.block_widths.iter().enumerate() {
            let bc = SeBottleNetConfig::for_stage(cin, w, cfg.se_reduction);
            blocks.push(SeBottleNet::new(&mut s, &format!("block{i}"), bc, cfg.se_enabled)?);
            cin = w;
        }
        Ok(LocalEncoder {
            stem,
            blocks,
            input_size,
        })
    }
}

pub fn encode_local(g: &mut Graph, enc: &LocalEncoder, image: Var) -> Result<LocalOutput> {
    let (_, h, w) = g.value(image).dims3();
    let min = 1usize << enc.blocks.len();
    if h < min || w < min {
        return Err(Error::Shape(format!(
            "local encoder needs at least {min}×{min} input for {} poolings, got {h}×{w}",
            enc.blocks.len()
        )));
    }
    if (h, w) != (enc.input_size, enc.input_size) {
        return Err(Error::Shape(format!(
            "local encoder expects {0}×{0} input, got {h}×{w}",
            enc.input_size
        )));
    }
    let mut x = enc.stem.forward(g, image);
    x = g.tap("local.stem", x);
    let mut skips = Vec::with_capacity(enc.blocks.len());
    for (i, block) in enc.blocks.iter().enumerate() {
        x = block.forward(g, x)?;
        x = g.tap(&format!("local.block{i}"), x);
        skips.push(x);
        x = g.max_pool2(x);
    }
    Ok(LocalOutput { feature: x, skips })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_gradients, perturb_params, worst};
    use crate::nn::{ParamKind, ParamStore};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn squeeze_examples() {
        let mut g = Graph::detached();
        let u = g.constant(Tensor::full(&[3, 2, 2], 3.0));
        let e = squeeze(&mut g, u);
        assert_eq!(g.value(e).data(), &[3.0; 3]);
        let u = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let e = squeeze(&mut g, u);
        assert_eq!(g.value(e).data(), &[2.5]);
        let u = g.constant(Tensor::zeros(&[2, 3, 3]));
        let e = squeeze(&mut g, u);
        assert_eq!(g.value(e).data(), &[0.0, 0.0]);
    }

    fn se_block(store: &mut ParamStore, c: usize, hidden: usize) -> SqueezeExcite {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        SqueezeExcite::new(&mut Builder::new(store, &mut rng), "se", c, hidden)
    }

    #[test]
    fn excite_zero_weights_gives_half() {
        let mut store = ParamStore::new();
        let se = se_block(&mut store, 4, 2);
        for id in 0..store.len() {
            store.value_mut(id).scale_assign(0.0);
        }
        let mut g = Graph::new(&store);
        let e = g.constant(Tensor::zeros(&[4]));
        let s = excite(&mut g, &se, e).unwrap();
        assert_eq!(g.value(s).data(), &[0.5; 4]);
    }

    #[test]
    fn excite_identity_weights_match_scalar_sigmoid() {
        let mut store = ParamStore::new();
        let se = se_block(&mut store, 2, 2);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        *store.value_mut(se.fc1.weight) = eye.clone();
        *store.value_mut(se.fc2.weight) = eye;
        let mut g = Graph::new(&store);
        let e = g.constant(Tensor::new(vec![2], vec![0.0, 10.0]));
        let s = excite(&mut g, &se, e).unwrap();
        let want = [0.5, 1.0 / (1.0 + (-10f64).exp())];
        for (a, b) in g.value(s).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((want[1] - 0.99995).abs() < 1e-5);
    }

    #[test]
    fn excite_stays_inside_unit_interval() {
        let mut store = ParamStore::new();
        let se = se_block(&mut store, 6, 2);
        for seed in 0..20 {
            let mut g = Graph::new(&store);
            let e = g.constant(rand_tensor(&[6], seed).map(|v| 50.0 * v));
            let s = excite(&mut g, &se, e).unwrap();
            assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn scale_examples() {
        let mut g = Graph::detached();
        let u_t = rand_tensor(&[3, 2, 2], 1);
        let u = g.constant(u_t.clone());
        let ones = g.constant(Tensor::full(&[3], 1.0));
        let out = scale(&mut g, u, ones).unwrap();
        assert_eq!(g.value(out), &u_t);
        let zeros = g.constant(Tensor::zeros(&[3]));
        let out = scale(&mut g, u, zeros).unwrap();
        assert_eq!(g.value(out).max_abs(), 0.0);
        let bad = g.constant(Tensor::new(vec![3], vec![0.5, 1.0, 2.0]));
        assert!(matches!(scale(&mut g, u, bad), Err(Error::Validation { .. })));
        let short = g.constant(Tensor::full(&[2], 0.5));
        assert!(matches!(scale(&mut g, u, short), Err(Error::Shape(_))));
    }

    fn block(store: &mut ParamStore, cin: usize, cout: usize) -> SeBottleNet {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = SeBottleNetConfig::for_stage(cin, cout, 2);
        SeBottleNet::new(&mut Builder::new(store, &mut rng), "blk", cfg, true).unwrap()
    }

    #[test]
    fn zero_residual_branch_is_identity() {
        let mut store = ParamStore::new();
        let blk = block(&mut store, 4, 4);
        for id in 0..store.len() {
            let e = store.entry(id);
            if e.name.starts_with("blk.expand") && e.kind != ParamKind::NormGain {
                store.value_mut(id).scale_assign(0.0);
            }
        }
        let x_t = rand_tensor(&[4, 6, 6], 3);
        let mut g = Graph::new(&store);
        let x = g.constant(x_t.clone());
        let y = blk.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y), &x_t);
    }

    #[test]
    fn block_shape_contract() {
        let mut store = ParamStore::new();
        let blk = block(&mut store, 4, 8);
        let mut g = Graph::new(&store);
        let x = g.constant(rand_tensor(&[4, 5, 7], 4));
        let y = blk.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[8, 5, 7]);
        let bad = g.constant(rand_tensor(&[3, 5, 7], 4));
        assert!(blk.forward(&mut g, bad).is_err());
    }

    #[test]
    fn bypass_reproduces_plain_bottleneck() {
        let mut store = ParamStore::new();
        let mut blk = block(&mut store, 4, 8);
        blk.bypass_se = true;
        let mut g = Graph::new(&store);
        let x = g.constant(rand_tensor(&[4, 6, 6], 5));
        let y = blk.forward(&mut g, x).unwrap();
        let f = blk.residual_branch(&mut g, x);
        let p = blk.shortcut.as_ref().unwrap().forward(&mut g, x);
        let plain = g.add(p, f);
        assert_eq!(g.value(y), g.value(plain));
    }

    #[test]
    fn se_block_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let se = se_block(&mut store, 4, 2);
        for id in 0..store.len() {
            *store.value_mut(id) = rand_tensor(store.value(id).shape(), id as u64 + 40);
        }
        let u = rand_tensor(&[4, 3, 3], 7);
        let w = rand_tensor(&[4, 3, 3], 8);
        let checks = check_param_gradients(&store, None, |g| {
            let x = g.constant(u.clone());
            let y = se.forward(g, x).unwrap();
            let wv = g.constant(w.clone());
            let y = g.mul(y, wv);
            g.sum(y)
        });
        let (name, err) = worst(&checks);
        assert!(err < 1e-4, "{name}: {err}");
    }

    #[test]
    fn bottleneck_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let blk = block(&mut store, 4, 8);
        perturb_params(&mut store, 9, 0.1);
        let x_t = rand_tensor(&[4, 8, 8], 9);
        let w = rand_tensor(&[8, 8, 8], 10);
        let checks = check_param_gradients(&store, None, |g| {
            let x = g.constant(x_t.clone());
            let y = blk.forward(g, x).unwrap();
            let wv = g.constant(w.clone());
            let y = g.mul(y, wv);
            g.sum(y)
        });
        let (name, err) = worst(&checks);
        assert!(err < 1e-4, "{name}: {err}");
    }

    fn encoder(store: &mut ParamStore, cfg: &LocalConfig, size: usize) -> Result<LocalEncoder> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        LocalEncoder::new(&mut Builder::new(store, &mut rng), cfg, 1, size)
    }

    #[test]
    fn sixty_four_input_pools_to_two() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, &LocalConfig::default(), 64).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(rand_tensor(&[1, 64, 64], 11).map(|v| v.abs()));
        let out = encode_local(&mut g, &enc, x).unwrap();
        assert_eq!(g.shape(out.feature), &[128, 2, 2]);
        assert_eq!(out.skips.len(), 5);
        let sizes: Vec<usize> = out.skips.iter().map(|s| g.shape(*s)[1]).collect();
        assert_eq!(sizes, [64, 32, 16, 8, 4]);
    }

    #[test]
    fn too_small_input_is_rejected() {
        let mut store = ParamStore::new();
        match encoder(&mut store, &LocalConfig::default(), 16) {
            Err(Error::Shape(msg)) => assert!(msg.contains("minimum size is 32"), "{msg}"),
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = LocalConfig {
            block_widths: vec![4, 4, 8, 8, 8],
            stem_width: 4,
            se_reduction: 2,
            se_enabled: true,
        };
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, &cfg, 32).unwrap();
        perturb_params(&mut store, 12, 0.1);
        let x_t = rand_tensor(&[1, 32, 32], 12).map(|v| v.abs());
        let w = rand_tensor(&[8, 1, 1], 13);
        let checks = check_param_gradients(&store, Some(4), |g| {
            let x = g.constant(x_t.clone());
            let out = encode_local(g, &enc, x).unwrap();
            let mut total = {
                let wv = g.constant(w.clone());
                let y = g.mul(out.feature, wv);
                g.sum(y)
            };
            for s in out.skips {
                let m = g.mean(s);
                total = g.add(total, m);
            }
            total
        });
        let (name, err) = worst(&checks);
        assert!(err < 1e-4, "{name}: {err}");
    }
}
