//! Pyramid-pooling fusion of the semantic, local and edge features and the
//! skip-connected upsampling decoder.

use serde::{Deserialize, Serialize};

use crate::autograd::{self, Graph, Var};
use crate::nn::{Builder, Conv2d, ConvNormAct};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Width of each of the three fusion branches.
    pub branch_channels: usize,
    /// Width of the last (full-resolution) decoder stage; doubles per coarser stage.
    pub base_width: usize,
    pub semantic_skips: bool,
    pub local_skips: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            branch_channels: 16,
            base_width: 8,
            semantic_skips: true,
            local_skips: true,
        }
    }
}

/// Channel counts and downsampling factors of everything the decoder consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderInputs {
    pub input_size: usize,
    /// Stride of the semantic feature map; the decoder runs `log2(stride)` stages.
    pub stride: usize,
    pub semantic_channels: usize,
    pub local_channels: usize,
    /// `(scale, channels)` of each encoder tap.
    pub semantic_taps: Vec<(usize, usize)>,
    pub local_taps: Vec<(usize, usize)>,
    /// Channels of the edge feature map, `None` when the edge module is off.
    pub edge_channels: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub branch_a: Conv2d,
    pub branch_b: Conv2d,
    pub branch_c: Conv2d,
    pub semantic_channels: usize,
    pub local_channels: usize,
    pub edge_channels: Option<usize>,
}

/// Concatenated output of branches A (1×1), B (3×3) and C (pooled, with edges).
pub fn fuse(g: &mut Graph, f: &Fusion, semantic: Var, local: Var, edge: Option<Var>) -> Result<Var> {
    let (cs, h, w) = g.value(semantic).dims3();
    let (cl, _, _) = g.value(local).dims3();
    if cs != f.semantic_channels || cl != f.local_channels {
        return Err(Error::Shape(format!(
            "fusion expects {}+{} channels, got {cs}+{cl}",
            f.semantic_channels, f.local_channels
        )));
    }
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("semantic map {h}×{w} is too small to pool")));
    }
    let local = g.resize(local, h, w);
    let cat = g.concat(&[semantic, local]);
    let a = f.branch_a.forward(g, cat);
    let a = g.relu(a);
    let b = f.branch_b.forward(g, cat);
    let b = g.relu(b);
    let pooled = g.avg_pool(cat, 2);
    let (ph, pw) = (h / 2, w / 2);
    let c_in = match (edge, f.edge_channels) {
        (Some(e), Some(ec)) => {
            let (c, eh, ew) = g.value(e).dims3();
            if c != ec || eh % ph != 0 || ew % pw != 0 || eh / ph != ew / pw {
                return Err(Error::Shape(format!(
                    "edge map {c}×{eh}×{ew} cannot be pooled onto {ph}×{pw}"
                )));
            }
            let ep = g.avg_pool(e, eh / ph);
            g.concat(&[pooled, ep])
        }
        (None, None) => pooled,
        (Some(_), None) => return Err(Error::Config("edge map given to a fusion built without edges".into())),
        (None, Some(_)) => return Err(Error::Config("fusion needs the edge feature map".into())),
    };
    let c = f.branch_c.forward(g, c_in);
    let c = g.relu(c);
    let c = g.resize(c, h, w);
    Ok(g.concat(&[a, b, c]))
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    /// Downsampling factor of this stage's output.
    pub scale: usize,
    pub semantic_skip: Option<Conv2d>,
    pub local_skip: Option<Conv2d>,
    pub conv1: ConvNormAct,
    pub conv2: ConvNormAct,
}

#[derive(Clone, Debug)]
pub struct FusionDecoder {
    pub fusion: Fusion,
    pub stages: Vec<DecoderStage>,
    pub head: Conv2d,
    pub num_classes: usize,
}

impl FusionDecoder {
    pub fn new(b: &mut Builder, cfg: &DecoderConfig, inputs: &DecoderInputs, num_classes: usize) -> Result<Self> {
        if cfg.branch_channels == 0 || cfg.base_width == 0 {
            return Err(Error::validation("branch_channels", "decoder widths must be ≥ 1"));
        }
        if !inputs.stride.is_power_of_two() || inputs.stride < 2 {
            return Err(Error::Config(format!("decoder stride {} is not a power of two ≥ 2", inputs.stride)));
        }
        let mut s = b.scope("decoder");
        let cb = cfg.branch_channels;
        let cat = inputs.semantic_channels + inputs.local_channels;
        let fusion = {
            let mut fs = s.scope("fuse");
            Fusion {
                branch_a: Conv2d::new(&mut fs, "branch_a", cat, cb, 1, 1),
                branch_b: Conv2d::new(&mut fs, "branch_b", cat, cb, 3, 1),
                branch_c: Conv2d::new(&mut fs, "branch_c", cat + inputs.edge_channels.unwrap_or(0), cb, 1, 1),
                semantic_channels: inputs.semantic_channels,
                local_channels: inputs.local_channels,
                edge_channels: inputs.edge_channels,
            }
        };
        let n_stages = inputs.stride.trailing_zeros() as usize;
        let mut cin = 3 * cb;
        let mut stages = Vec::with_capacity(n_stages);
        for i in 0..n_stages {
            let scale = inputs.stride >> (i + 1);
            let width = cfg.base_width << (n_stages - 1 - i);
            let mut ss = s.scope(&format!("stage{i}"));
            let find = |taps: &[(usize, usize)]| taps.iter().find(|t| t.0 == scale).map(|t| t.1);
            let semantic_skip = find(&inputs.semantic_taps)
                .filter(|_| cfg.semantic_skips)
                .map(|c| Conv2d::new(&mut ss, "semantic_skip", c, width, 1, 1));
            let local_skip = find(&inputs.local_taps)
                .filter(|_| cfg.local_skips)
                .map(|c| Conv2d::new(&mut ss, "local_skip", c, width, 1, 1));
            let cat_in = cin + width * (semantic_skip.is_some() as usize + local_skip.is_some() as usize);
            stages.push(DecoderStage {
                scale,
                semantic_skip,
                local_skip,
                conv1: ConvNormAct::new(&mut ss, "conv1", cat_in, width, 3, 1, true),
                conv2: ConvNormAct::new(&mut ss, "conv2", width, width, 3, 1, true),
            });
            cin = width;
        }
        let head = Conv2d::new(&mut s, "head", cin, num_classes, 1, 1);
        Ok(FusionDecoder {
            fusion,
            stages,
            head,
            num_classes,
        })
    }
}

fn find_skip(g: &Graph, skips: &[Var], h: usize, w: usize) -> Option<Var> {
    skips.iter().copied().find(|&s| {
        let sh = g.shape(s);
        sh[1] == h && sh[2] == w
    })
}

/// Upsampling stages with per-scale skips from both encoders, then the
/// `1×1` class head. Skip lists may be in any order; taps are matched by size.
pub fn decode(g: &mut Graph, dec: &FusionDecoder, fused: Var, semantic_skips: &[Var], local_skips: &[Var]) -> Result<Var> {
    let mut x = fused;
    for (i, stage) in dec.stages.iter().enumerate() {
        let (_, h, w) = g.value(x).dims3();
        let (h, w) = (2 * h, 2 * w);
        x = g.resize(x, h, w);
        let mut parts = vec![x];
        for (conv, skips, kind) in [
            (&stage.semantic_skip, semantic_skips, "semantic"),
            (&stage.local_skip, local_skips, "local"),
        ] {
            if let Some(conv) = conv {
                let tap = find_skip(g, skips, h, w).ok_or_else(|| {
                    Error::Config(format!("decoder stage {i} needs a {kind} skip at {h}×{w}"))
                })?;
                parts.push(conv.forward(g, tap));
            }
        }
        x = g.concat(&parts);
        x = stage.conv1.forward(g, x);
        x = stage.conv2.forward(g, x);
        x = g.tap(&format!("decoder.stage{i}"), x);
    }
    Ok(dec.head.forward(g, x))
}

/// Per-pixel softmax over the classes of a `K×H×W` logit map.
pub fn predict_probabilities(logits: &Tensor) -> Result<Tensor> {
    if !logits.all_finite() {
        return Err(Error::validation("logits", "non-finite logit"));
    }
    Ok(autograd::softmax_channels(logits))
}

/// Per-pixel argmax class of a `K×H×W` map; ties resolve to the lower class.
pub fn argmax_classes(scores: &Tensor) -> Vec<u8> {
    let (k, h, w) = scores.dims3();
    let hw = h * w;
    let d = scores.data();
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * hw + p] > d[best * hw + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn inputs(edge: bool) -> DecoderInputs {
        DecoderInputs {
            input_size: 64,
            stride: 8,
            semantic_channels: 6,
            local_channels: 10,
            semantic_taps: vec![(2, 3), (4, 4), (8, 5)],
            local_taps: vec![(1, 2), (2, 3), (4, 4), (8, 5), (16, 6)],
            edge_channels: edge.then_some(5),
        }
    }

    fn build(store: &mut ParamStore, cfg: &DecoderConfig, inp: &DecoderInputs) -> FusionDecoder {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        FusionDecoder::new(&mut Builder::new(store, &mut rng), cfg, inp, 3).unwrap()
    }

    struct Feeds {
        sem: Var,
        loc: Var,
        edge: Option<Var>,
        sem_skips: Vec<Var>,
        loc_skips: Vec<Var>,
    }

    fn feeds(g: &mut Graph, inp: &DecoderInputs, size: usize, zero: bool) -> Feeds {
        let mut seed = 0;
        let mut t = |g: &mut Graph, shape: &[usize]| {
            seed += 1;
            g.constant(if zero { Tensor::zeros(shape) } else { rand_tensor(shape, seed) })
        };
        let s = size / inp.stride;
        let sem = t(g, &[inp.semantic_channels, s, s]);
        let loc = t(g, &[inp.local_channels, size / 32, size / 32]);
        let edge = inp.edge_channels.map(|c| t(g, &[c, size, size]));
        let sem_skips = inp.semantic_taps.iter().map(|&(sc, c)| t(g, &[c, size / sc, size / sc])).collect();
        let loc_skips = inp.local_taps.iter().map(|&(sc, c)| t(g, &[c, size / sc, size / sc])).collect();
        Feeds {
            sem,
            loc,
            edge,
            sem_skips,
            loc_skips,
        }
    }

    #[test]
    fn fusion_has_three_branches_of_configured_width() {
        let mut store = ParamStore::new();
        let cfg = DecoderConfig::default();
        let inp = inputs(true);
        let dec = build(&mut store, &cfg, &inp);
        let branches = [&dec.fusion.branch_a, &dec.fusion.branch_b, &dec.fusion.branch_c];
        assert_eq!(branches.len(), 3);
        let mut g = Graph::new(&store);
        let f = feeds(&mut g, &inp, 64, false);
        let out = fuse(&mut g, &dec.fusion, f.sem, f.loc, f.edge).unwrap();
        assert_eq!(g.shape(out), &[3 * cfg.branch_channels, 8, 8]);
    }

    #[test]
    fn zero_inputs_fuse_to_zero() {
        let mut store = ParamStore::new();
        let inp = inputs(true);
        let dec = build(&mut store, &DecoderConfig::default(), &inp);
        let mut g = Graph::new(&store);
        let f = feeds(&mut g, &inp, 64, true);
        let out = fuse(&mut g, &dec.fusion, f.sem, f.loc, f.edge).unwrap();
        assert_eq!(g.value(out).max_abs(), 0.0);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        let inp = inputs(false);
        let dec = build(&mut store, &DecoderConfig::default(), &inp);
        let mut g = Graph::new(&store);
        let sem = g.constant(Tensor::zeros(&[7, 8, 8]));
        let loc = g.constant(Tensor::zeros(&[10, 2, 2]));
        assert!(matches!(fuse(&mut g, &dec.fusion, sem, loc, None), Err(Error::Shape(_))));
    }

    #[test]
    fn decoder_produces_class_logits_at_input_size() {
        for (sem_skips, local_skips) in [(true, true), (false, true), (true, false), (false, false)] {
            let cfg = DecoderConfig {
                semantic_skips: sem_skips,
                local_skips,
                ..DecoderConfig::default()
            };
            let mut store = ParamStore::new();
            let inp = inputs(true);
            let dec = build(&mut store, &cfg, &inp);
            assert_eq!(dec.stages.len(), 3);
            assert_eq!(dec.stages.len(), inp.stride.ilog2() as usize);
            let mut g = Graph::new(&store);
            let f = feeds(&mut g, &inp, 64, false);
            let fused = fuse(&mut g, &dec.fusion, f.sem, f.loc, f.edge).unwrap();
            let logits = decode(&mut g, &dec, fused, &f.sem_skips, &f.loc_skips).unwrap();
            assert_eq!(g.shape(logits), &[3, 64, 64]);
            assert!(g.value(logits).all_finite());
        }
    }

    #[test]
    fn stage_count_is_log2_of_stride() {
        for stride in [2usize, 4, 8, 16] {
            let inp = DecoderInputs {
                stride,
                ..inputs(false)
            };
            let mut store = ParamStore::new();
            let dec = build(&mut store, &DecoderConfig::default(), &inp);
            let mut walk = stride;
            let mut stages = 0;
            while walk > 1 {
                walk /= 2;
                stages += 1;
            }
            assert_eq!(dec.stages.len(), stages);
            assert_eq!(dec.stages.last().unwrap().scale, 1);
        }
    }

    #[test]
    fn missing_skip_is_a_configuration_error() {
        let mut store = ParamStore::new();
        let inp = inputs(false);
        let dec = build(&mut store, &DecoderConfig::default(), &inp);
        let mut g = Graph::new(&store);
        let f = feeds(&mut g, &inp, 64, false);
        let fused = fuse(&mut g, &dec.fusion, f.sem, f.loc, None).unwrap();
        assert!(matches!(
            decode(&mut g, &dec, fused, &[], &f.loc_skips),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn probabilities_examples() {
        let p = predict_probabilities(&Tensor::zeros(&[3, 2, 2])).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let mut t = Tensor::zeros(&[3, 1, 1]);
        t.data_mut()[0] = 10.0;
        let p = predict_probabilities(&t).unwrap();
        assert_eq!(argmax_classes(&p), vec![0]);
        assert!(p.data()[0] > 0.999);
        let want = 10f64.exp() / (10f64.exp() + 2.0);
        assert!((p.data()[0] - want).abs() < 1e-15);
        for seed in 0..5 {
            let l = rand_tensor(&[3, 4, 4], seed).map(|v| 20.0 * v);
            let p = predict_probabilities(&l).unwrap();
            for px in 0..16 {
                let s: f64 = (0..3).map(|c| p.data()[c * 16 + px]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
            let shifted = l.map(|v| v + 3.5);
            assert_eq!(argmax_classes(&l), argmax_classes(&shifted));
        }
        let mut bad = Tensor::zeros(&[3, 1, 1]);
        bad.data_mut()[1] = f64::NAN;
        assert!(predict_probabilities(&bad).is_err());
    }
}
