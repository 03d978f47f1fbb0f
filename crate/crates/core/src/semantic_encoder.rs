//! Convolutional backbone, patch embedding with learnable positions, a stack
//! of pre-norm transformer blocks and a three-layer convolutional head.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::nn::{Builder, Conv2d, ConvNormAct, LayerNorm, Linear, ParamId, ParamKind};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    pub dropout: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            n_layers: 4,
            n_heads: 4,
            head_dim: 8,
            mlp_dim: 64,
            dropout: 0.0,
        }
    }
}

impl AttentionConfig {
    pub fn embed_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::validation("n_layers", "need at least one transformer layer"));
        }
        if self.n_heads == 0 || self.head_dim == 0 || self.mlp_dim == 0 {
            return Err(Error::validation("n_heads", "heads, head_dim and mlp_dim must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("dropout", format!("must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticConfig {
    /// Output widths of the stride-2 backbone stages.
    pub backbone_widths: Vec<usize>,
    pub patch_size: usize,
    pub attention: AttentionConfig,
    /// Channels of the semantic feature map.
    pub out_channels: usize,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        SemanticConfig {
            backbone_widths: vec![8, 16, 32],
            patch_size: 1,
            attention: AttentionConfig::default(),
            out_channels: 32,
        }
    }
}

impl SemanticConfig {
    pub fn stride(&self) -> usize {
        1 << self.backbone_widths.len()
    }

    pub fn validate(&self, input_size: usize) -> Result<()> {
        self.attention.validate()?;
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            return Err(Error::validation("backbone_widths", "need ≥ 1 stage with nonzero width"));
        }
        if self.patch_size == 0 || self.out_channels == 0 {
            return Err(Error::validation("patch_size", "patch size and channel count must be ≥ 1"));
        }
        let side = input_size / self.stride();
        if side == 0 || input_size % self.stride() != 0 {
            return Err(Error::Shape(format!(
                "input {input_size} is not divisible by the backbone stride {}",
                self.stride()
            )));
        }
        if side % self.patch_size != 0 {
            return Err(Error::Shape(format!(
                "backbone map {side}×{side} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// `N×D` tokens of a `grid.0 × grid.1` patch grid.
#[derive(Clone, Copy, Debug)]
pub struct TokenMatrix {
    pub tokens: Var,
    pub patch_size: usize,
    pub grid: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv: Conv2d,
    pub position: ParamId,
    pub patch_size: usize,
    pub dim: usize,
}

impl PatchEmbed {
    /// `grid` is the token grid the position table is sized for.
    pub fn new(b: &mut Builder, name: &str, cin: usize, dim: usize, patch_size: usize, grid: (usize, usize)) -> Self {
        let mut s = b.scope(name);
        PatchEmbed {
            conv: Conv2d::patchify(&mut s, "proj", cin, dim, patch_size),
            position: s.constant("position", ParamKind::PosEmbedding, &[grid.0 * grid.1, dim], 0.0),
            patch_size,
            dim,
        }
    }
}

/// Strided `P×P` convolution per patch plus its learnable position vector.
pub fn embed_patches(g: &mut Graph, embed: &PatchEmbed, fm: Var) -> Result<TokenMatrix> {
    let (_, h, w) = g.value(fm).dims3();
    let p = embed.patch_size;
    if h % p != 0 || w % p != 0 {
        let pad_h = (p - h % p) % p;
        let pad_w = (p - w % p) % p;
        return Err(Error::Shape(format!(
            "feature map {h}×{w} is not divisible by patch size {p}; pad by {pad_h}×{pad_w}"
        )));
    }
    let grid = (h / p, w / p);
    let n = grid.0 * grid.1;
    let x = embed.conv.forward(g, fm);
    let x = g.reshape(x, &[embed.dim, n]);
    let x = g.transpose(x);
    let pos = g.param(embed.position);
    if g.shape(pos) != [n, embed.dim] {
        return Err(Error::Shape(format!(
            "position table {:?} does not match {n} tokens of width {}",
            g.shape(pos),
            embed.dim
        )));
    }
    let tokens = g.add(x, pos);
    Ok(TokenMatrix {
        tokens,
        patch_size: p,
        grid,
    })
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl SelfAttention {
    pub fn new(b: &mut Builder, name: &str, cfg: &AttentionConfig) -> Self {
        let mut s = b.scope(name);
        let d = cfg.embed_dim();
        SelfAttention {
            query: Linear::new(&mut s, "query", d, d),
            key: Linear::new(&mut s, "key", d, d),
            value: Linear::new(&mut s, "value", d, d),
            proj: Linear::new(&mut s, "proj", d, d),
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim,
        }
    }
}

/// Scaled dot-product attention per head, heads concatenated and projected.
/// Returns the output tokens and each head's `N×N` attention matrix.
pub fn multi_head_self_attention(g: &mut Graph, attn: &SelfAttention, x: Var) -> Result<(Var, Vec<Var>)> {
    let (_, d) = g.value(x).dims2();
    if d != attn.n_heads * attn.head_dim {
        return Err(Error::Shape(format!(
            "token width {d} != {} heads × {}",
            attn.n_heads, attn.head_dim
        )));
    }
    let q = attn.query.forward(g, x);
    let k = attn.key.forward(g, x);
    let v = attn.value.forward(g, x);
    let scale = 1.0 / (attn.head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(attn.n_heads);
    let mut maps = Vec::with_capacity(attn.n_heads);
    for h in 0..attn.n_heads {
        let (start, len) = (h * attn.head_dim, attn.head_dim);
        let qh = g.col_slice(q, start, len);
        let kh = g.col_slice(k, start, len);
        let vh = g.col_slice(v, start, len);
        let logits = g.matmul_t(qh, kh);
        let logits = g.scale(logits, scale);
        let a = g.softmax_rows(logits);
        maps.push(a);
        heads.push(g.matmul(a, vh));
    }
    let cat = g.col_concat(&heads);
    Ok((attn.proj.forward(g, cat), maps))
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new(b: &mut Builder, name: &str, cfg: &AttentionConfig) -> Self {
        let mut s = b.scope(name);
        let d = cfg.embed_dim();
        TransformerBlock {
            norm1: LayerNorm::new(&mut s, "norm1", d),
            attn: SelfAttention::new(&mut s, "attn", cfg),
            norm2: LayerNorm::new(&mut s, "norm2", d),
            fc1: Linear::new(&mut s, "fc1", d, cfg.mlp_dim),
            fc2: Linear::new(&mut s, "fc2", cfg.mlp_dim, d),
            dropout: cfg.dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Vec<Var>)> {
        let h = self.norm1.forward(g, x);
        let (a, maps) = multi_head_self_attention(g, &self.attn, h)?;
        let a = g.dropout(a, self.dropout);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, x);
        let h = self.fc1.forward(g, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h);
        let h = g.dropout(h, self.dropout);
        Ok((g.add(x, h), maps))
    }
}

#[derive(Clone, Debug)]
pub struct SemanticEncoder {
    pub backbone: Vec<ConvNormAct>,
    pub embed: PatchEmbed,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub head: [ConvNormAct; 3],
    pub input_size: usize,
}

/// Semantic feature map, backbone taps (shallow to deep) and attention maps.
pub struct SemanticOutput {
    pub feature: Var,
    pub skips: Vec<Var>,
    pub attention: Vec<Var>,
}

impl SemanticEncoder {
    pub fn new(b: &mut Builder, cfg: &SemanticConfig, in_channels: usize, input_size: usize) -> Result<Self> {
        cfg.validate(input_size)?;
        let mut s = b.scope("semantic");
        let mut cin = in_channels;
        let mut backbone = Vec::new();
        for (i, &w) in cfg.backbone_widths.iter().enumerate() {
            backbone.push(ConvNormAct::new(&mut s, &format!("backbone{i}"), cin, w, 3, 2, true));
            cin = w;
        }
        let side = input_size / cfg.stride() / cfg.patch_size;
        let d = cfg.attention.embed_dim();
        let embed = PatchEmbed::new(&mut s, "embed", cin, d, cfg.patch_size, (side, side));
        let blocks = (0..cfg.attention.n_layers)
            .map(|i| TransformerBlock::new(&mut s, &format!("block{i}"), &cfg.attention))
            .collect();
        let norm = LayerNorm::new(&mut s, "norm", d);
        let c = cfg.out_channels;
        let head = [
            ConvNormAct::new(&mut s, "head0", d, c, 3, 1, true),
            ConvNormAct::new(&mut s, "head1", c, c, 3, 1, true),
            ConvNormAct::new(&mut s, "head2", c, c, 3, 1, true),
        ];
        Ok(SemanticEncoder {
            backbone,
            embed,
            blocks,
            norm,
            head,
            input_size,
        })
    }

    /// Number of skip taps, one per backbone stage.
    pub fn tap_count(&self) -> usize {
        self.backbone.len()
    }
}

/// Runs the semantic branch on a `C×H×W` image.
pub fn encode_semantic(g: &mut Graph, enc: &SemanticEncoder, image: Var) -> Result<SemanticOutput> {
    let (_, h, w) = g.value(image).dims3();
    if (h, w) != (enc.input_size, enc.input_size) {
        return Err(Error::Shape(format!(
            "semantic encoder expects {0}×{0} input, got {h}×{w}",
            enc.input_size
        )));
    }
    let mut x = image;
    let mut skips = Vec::with_capacity(enc.backbone.len());
    for (i, stage) in enc.backbone.iter().enumerate() {
        x = stage.forward(g, x);
        x = g.tap(&format!("semantic.backbone{i}"), x);
        skips.push(x);
    }
    let (_, bh, bw) = g.value(x).dims3();
    let tokens = embed_patches(g, &enc.embed, x)?;
    let mut t = tokens.tokens;
    let mut attention = Vec::new();
    for (i, block) in enc.blocks.iter().enumerate() {
        let (out, maps) = block.forward(g, t)?;
        t = g.tap(&format!("semantic.block{i}"), out);
        attention.extend(maps);
    }
    let t = enc.norm.forward(g, t);
    let (gh, gw) = tokens.grid;
    let t = g.transpose(t);
    let mut fm = g.reshape(t, &[enc.embed.dim, gh, gw]);
    if tokens.patch_size > 1 {
        fm = g.resize(fm, bh, bw);
    }
    for (i, conv) in enc.head.iter().enumerate() {
        fm = conv.forward(g, fm);
        fm = g.tap(&format!("semantic.head{i}"), fm);
    }
    Ok(SemanticOutput {
        feature: fm,
        skips,
        attention,
    })
}
