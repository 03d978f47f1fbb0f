//! Edge stream: encoder taps projected to one channel at full resolution,
//! gated excitation convolutions over the retained levels, the Canny map
//! appended, and a sigmoid edge head.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::local_encoder::SqueezeExcite;
use crate::nn::{Builder, Conv2d, GroupNorm};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeConfig {
    pub enabled: bool,
    /// Width of the edge stream.
    pub channels: usize,
    /// Downsampling factors of the paired encoder taps, shallow to deep.
    pub tap_scales: Vec<usize>,
    /// Leading (shallow) levels that get no GEC layer.
    pub shallow_exclusions: usize,
    pub se_reduction: usize,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        EdgeConfig {
            enabled: true,
            channels: 16,
            tap_scales: vec![2, 4, 8],
            shallow_exclusions: 1,
            se_reduction: 4,
        }
    }
}

impl EdgeConfig {
    pub fn retained(&self) -> usize {
        self.tap_scales.len().saturating_sub(self.shallow_exclusions)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.se_reduction == 0 {
            return Err(Error::validation("channels", "edge width and SE reduction must be ≥ 1"));
        }
        if self.retained() < 2 {
            return Err(Error::Config(format!(
                "edge stream needs at least 2 usable taps, got {} taps with {} excluded",
                self.tap_scales.len(),
                self.shallow_exclusions
            )));
        }
        if self.tap_scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("edge tap scales must increase from shallow to deep".into()));
        }
        Ok(())
    }
}

/// 1×1 projections of one semantic tap and one local tap to a single channel.
#[derive(Clone, Debug)]
pub struct TapProjection {
    pub semantic: Conv2d,
    pub local: Conv2d,
}

impl TapProjection {
    pub fn new(b: &mut Builder, name: &str, sem_channels: usize, local_channels: usize) -> Self {
        let mut s = b.scope(name);
        TapProjection {
            semantic: Conv2d::new(&mut s, "semantic", sem_channels, 1, 1, 1),
            local: Conv2d::new(&mut s, "local", local_channels, 1, 1, 1),
        }
    }
}

/// Both taps projected to one channel and bilinearly upsampled to `size`.
pub fn project_taps(g: &mut Graph, proj: &TapProjection, t: Var, c: Var, size: (usize, usize)) -> Result<(Var, Var)> {
    let (_, th, tw) = g.value(t).dims3();
    let (_, ch, cw) = g.value(c).dims3();
    if (th, tw) != (ch, cw) {
        return Err(Error::Shape(format!(
            "semantic tap {th}×{tw} and local tap {ch}×{cw} come from different levels"
        )));
    }
    let tp = proj.semantic.forward(g, t);
    let cp = proj.local.forward(g, c);
    Ok((g.resize(tp, size.0, size.1), g.resize(cp, size.0, size.1)))
}

/// One gated excitation convolution: attention from the projected taps and
/// the stream, then the residual gate.
#[derive(Clone, Debug)]
pub struct GecLayer {
    pub se: SqueezeExcite,
    pub attention: Conv2d,
    pub gate: Conv2d,
    pub norm: GroupNorm,
}

impl GecLayer {
    pub fn new(b: &mut Builder, name: &str, channels: usize, se_reduction: usize) -> Self {
        let mut s = b.scope(name);
        let cin = channels + 2;
        GecLayer {
            se: SqueezeExcite::new(&mut s, "se", cin, (cin / se_reduction).max(1)),
            attention: Conv2d::new(&mut s, "attention", cin, 1, 1, 1),
            gate: Conv2d::without_bias(&mut s, "gate", channels, channels, 1, 1),
            norm: GroupNorm::new(&mut s, "norm", channels),
        }
    }
}

/// `α = σ(C₁ₓ₁(SE(concat(t′, c′, e))))`, a `1×H×W` map in `(0, 1)`.
pub fn gec_attention(g: &mut Graph, layer: &GecLayer, t: Var, c: Var, e: Var) -> Result<Var> {
    let (_, h, w) = g.value(e).dims3();
    for (name, v) in [("t′", t), ("c′", c)] {
        if g.shape(v) != [1, h, w] {
            return Err(Error::Shape(format!("{name} is {:?}, expected [1, {h}, {w}]", g.shape(v))));
        }
    }
    let cat = g.concat(&[t, c, e]);
    let x = layer.se.forward(g, cat)?;
    let a = layer.attention.forward(g, x);
    Ok(g.sigmoid(a))
}

/// `C₁ₓ₁(e ⊙ α + e)`.
pub fn gec_apply(g: &mut Graph, layer: &GecLayer, e: Var, alpha: Var) -> Result<Var> {
    let (_, h, w) = g.value(e).dims3();
    if g.shape(alpha) != [1, h, w] {
        return Err(Error::Shape(format!("gate {:?} does not match stream {h}×{w}", g.shape(alpha))));
    }
    let gated = g.mul_spatial(e, alpha);
    let sum = g.add(gated, e);
    Ok(layer.gate.forward(g, sum))
}

#[derive(Clone, Debug)]
pub struct EdgeModule {
    pub cfg: EdgeConfig,
    /// One projection per retained level.
    pub projections: Vec<TapProjection>,
    pub seed: Conv2d,
    pub gec: Vec<GecLayer>,
    pub head: Conv2d,
}

pub struct EdgeOutput {
    /// `1×H×W` edge probabilities.
    pub pred: Var,
    /// Last GEC output concatenated with the Canny map, `(channels+1)×H×W`.
    pub feature: Var,
    pub alphas: Vec<Var>,
}

impl EdgeModule {
    /// `tap_channels[i]` are the (semantic, local) widths at `cfg.tap_scales[i]`.
    pub fn new(b: &mut Builder, cfg: &EdgeConfig, tap_channels: &[(usize, usize)]) -> Result<Self> {
        cfg.validate()?;
        if tap_channels.len() != cfg.tap_scales.len() {
            return Err(Error::Config(format!(
                "{} tap widths for {} edge levels",
                tap_channels.len(),
                cfg.tap_scales.len()
            )));
        }
        let mut s = b.scope("edge");
        let ch = cfg.channels;
        let projections = tap_channels[cfg.shallow_exclusions..]
            .iter()
            .enumerate()
            .map(|(i, &(tc, cc))| TapProjection::new(&mut s, &format!("project{i}"), tc, cc))
            .collect();
        let seed = Conv2d::new(&mut s, "seed", 2, ch, 1, 1);
        let gec = (0..cfg.retained())
            .map(|i| GecLayer::new(&mut s, &format!("gec{i}"), ch, cfg.se_reduction))
            .collect();
        let head = Conv2d::new(&mut s, "head", ch + 1, 1, 1, 1);
        Ok(EdgeModule {
            cfg: cfg.clone(),
            projections,
            seed,
            gec,
            head,
        })
    }

    pub fn feature_channels(&self) -> usize {
        self.cfg.channels + 1
    }
}

/// `taps` pairs semantic and local maps level by level, shallow to deep.
/// The first `shallow_exclusions` levels are skipped, the stream is seeded
/// from the first retained level and one GEC layer runs per retained level.
pub fn predict_edges(g: &mut Graph, module: &EdgeModule, taps: &[(Var, Var)], canny: Var) -> Result<EdgeOutput> {
    let excl = module.cfg.shallow_exclusions;
    if taps.len() != module.cfg.tap_scales.len() || taps.len() < excl + 2 {
        return Err(Error::Config(format!(
            "edge stream got {} taps, configured for {} with {excl} excluded",
            taps.len(),
            module.cfg.tap_scales.len()
        )));
    }
    let (_, h, w) = g.value(canny).dims3();
    let mut projected = Vec::with_capacity(taps.len() - excl);
    for (i, &(t, c)) in taps[excl..].iter().enumerate() {
        projected.push(project_taps(g, &module.projections[i], t, c, (h, w))?);
    }
    let (t0, c0) = projected[0];
    let seed_in = g.concat(&[t0, c0]);
    let mut e = module.seed.forward(g, seed_in);
    let mut alphas = Vec::with_capacity(projected.len());
    for (i, &(t, c)) in projected.iter().enumerate() {
        let layer = &module.gec[i];
        let alpha = gec_attention(g, layer, t, c, e)?;
        e = gec_apply(g, layer, e, alpha)?;
        e = layer.norm.forward(g, e);
        e = g.relu(e);
        e = g.tap(&format!("edge.gec{i}"), e);
        alphas.push(alpha);
    }
    let feature = g.concat(&[e, canny]);
    let logit = module.head.forward(g, feature);
    Ok(EdgeOutput {
        pred: g.sigmoid(logit),
        feature,
        alphas,
    })
}
