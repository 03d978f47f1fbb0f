//! Model configuration and the composed network.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Observer, Var};
use crate::data::{EdgeMap, Grid, LabelMap};
use crate::edge_module::{predict_edges, EdgeConfig, EdgeModule};
use crate::fusion_decoder::{argmax_classes, decode, fuse, DecoderConfig, DecoderInputs, FusionDecoder};
use crate::local_encoder::{encode_local, LocalConfig, LocalEncoder};
use crate::nn::{Builder, ParamStore};
use crate::rng::substream;
use crate::semantic_encoder::{encode_semantic, SemanticConfig, SemanticEncoder};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub semantic: SemanticConfig,
    pub local: LocalConfig,
    pub edge: EdgeConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_base_width(8)
    }
}

/// Architecture switches used by the ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub disable_semantic_skips: bool,
    pub disable_local_skips: bool,
    pub disable_all_skips: bool,
    pub disable_edge_module: bool,
}

impl ModelConfig {
    /// 64×64 toy network with every width derived from `base`.
    pub fn with_base_width(base: usize) -> Self {
        ModelConfig {
            input_size: 64,
            in_channels: 1,
            num_classes: 3,
            semantic: SemanticConfig {
                backbone_widths: vec![base, 2 * base, 4 * base],
                out_channels: 4 * base,
                ..SemanticConfig::default()
            },
            local: LocalConfig {
                block_widths: (0..5).map(|i| base << i).collect(),
                stem_width: base,
                ..LocalConfig::default()
            },
            edge: EdgeConfig {
                channels: 2 * base,
                ..EdgeConfig::default()
            },
            decoder: DecoderConfig {
                branch_channels: 2 * base,
                base_width: base,
                ..DecoderConfig::default()
            },
        }
    }

    /// The configuration a set of ablation flags actually trains.
    pub fn effective(&self, flags: &AblationFlags) -> ModelConfig {
        let mut cfg = self.clone();
        if flags.disable_all_skips || flags.disable_semantic_skips {
            cfg.decoder.semantic_skips = false;
        }
        if flags.disable_all_skips || flags.disable_local_skips {
            cfg.decoder.local_skips = false;
        }
        if flags.disable_edge_module {
            cfg.edge.enabled = false;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.in_channels == 0 {
            return Err(Error::validation("input_size", "input size and channels must be ≥ 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::validation("num_classes", "need background plus at least one class"));
        }
        self.semantic.validate(self.input_size)?;
        self.local.validate(self.input_size)?;
        if self.edge.enabled {
            self.edge.validate()?;
            for &s in &self.edge.tap_scales {
                if !s.is_power_of_two() || s < 2 || s > self.semantic.stride() || s >= self.local.stride() {
                    return Err(Error::Config(format!(
                        "edge tap scale {s} has no matching tap in both encoders"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn semantic_taps(&self) -> Vec<(usize, usize)> {
        self.semantic
            .backbone_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| (2 << i, w))
            .collect()
    }

    pub fn local_taps(&self) -> Vec<(usize, usize)> {
        self.local
            .block_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| (1 << i, w))
            .collect()
    }
}

/// Dual-encoder segmentation network with its parameters.
#[derive(Clone, Debug)]
pub struct TransFusionNet {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub semantic: SemanticEncoder,
    pub local: LocalEncoder,
    pub edge: Option<EdgeModule>,
    pub decoder: FusionDecoder,
}

pub struct ModelOutput {
    /// `K×H×W` class logits.
    pub logits: Var,
    /// `1×H×W` edge probabilities, absent without the edge module.
    pub edge_pred: Option<Var>,
    pub attention: Vec<Var>,
}

impl TransFusionNet {
    /// Builds the network with parameters drawn from the `init` sub-stream of `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = substream(seed, "init", 0);
        let mut b = Builder::new(&mut store, &mut rng);
        let semantic = SemanticEncoder::new(&mut b, &cfg.semantic, cfg.in_channels, cfg.input_size)?;
        let local = LocalEncoder::new(&mut b, &cfg.local, cfg.in_channels, cfg.input_size)?;
        let sem_taps = cfg.semantic_taps();
        let loc_taps = cfg.local_taps();
        let edge = if cfg.edge.enabled {
            let widths: Vec<(usize, usize)> = cfg
                .edge
                .tap_scales
                .iter()
                .map(|s| {
                    let t = sem_taps.iter().find(|t| t.0 == *s).expect("validated").1;
                    let c = loc_taps.iter().find(|t| t.0 == *s).expect("validated").1;
                    (t, c)
                })
                .collect();
            Some(EdgeModule::new(&mut b, &cfg.edge, &widths)?)
        } else {
            None
        };
        let inputs = DecoderInputs {
            input_size: cfg.input_size,
            stride: cfg.semantic.stride(),
            semantic_channels: cfg.semantic.out_channels,
            local_channels: *cfg.local.block_widths.last().expect("validated"),
            semantic_taps: sem_taps,
            local_taps: loc_taps,
            edge_channels: edge.as_ref().map(|e| e.feature_channels()),
        };
        let decoder = FusionDecoder::new(&mut b, &cfg.decoder, &inputs, cfg.num_classes)?;
        Ok(TransFusionNet {
            cfg: cfg.clone(),
            store,
            semantic,
            local,
            edge,
            decoder,
        })
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::new(&self.store)
    }

    /// Full forward pass from a `C×H×W` image and a `1×H×W` Canny map.
    pub fn forward_vars(&self, g: &mut Graph, image: Var, canny: Var) -> Result<ModelOutput> {
        let sem = encode_semantic(g, &self.semantic, image)?;
        let loc = encode_local(g, &self.local, image)?;
        let (edge_fm, edge_pred) = match &self.edge {
            Some(module) => {
                let taps: Vec<(Var, Var)> = module
                    .cfg
                    .tap_scales
                    .iter()
                    .map(|&s| {
                        let i = s.trailing_zeros() as usize;
                        (sem.skips[i - 1], loc.skips[i])
                    })
                    .collect();
                let out = predict_edges(g, module, &taps, canny)?;
                (Some(out.feature), Some(out.pred))
            }
            None => (None, None),
        };
        let fused = fuse(g, &self.decoder.fusion, sem.feature, loc.feature, edge_fm)?;
        let logits = decode(g, &self.decoder, fused, &sem.skips, &loc.skips)?;
        Ok(ModelOutput {
            logits,
            edge_pred,
            attention: sem.attention,
        })
    }

    pub fn forward(&self, g: &mut Graph, image: &Grid<f64>, canny: &EdgeMap) -> Result<ModelOutput> {
        let (x, c) = self.inputs(g, image, canny)?;
        self.forward_vars(g, x, c)
    }

    fn inputs(&self, g: &mut Graph, image: &Grid<f64>, canny: &EdgeMap) -> Result<(Var, Var)> {
        let n = self.cfg.input_size;
        if (image.height, image.width) != (n, n) {
            return Err(Error::Shape(format!(
                "model expects {n}×{n} slices, got {}×{}; resample the volume first",
                image.height, image.width
            )));
        }
        if (canny.values.height, canny.values.width) != (n, n) {
            return Err(Error::Shape("Canny map does not match the image".into()));
        }
        let x = g.constant(Tensor::new(vec![1, n, n], image.data.clone()));
        let c = g.constant(Tensor::new(vec![1, n, n], canny.values.data.clone()));
        Ok((x, c))
    }

    /// Inference logits (`K×H×W`) and edge probabilities.
    pub fn predict(&self, image: &Grid<f64>, canny: &EdgeMap) -> Result<(Tensor, Option<Tensor>)> {
        self.predict_with(image, canny, &mut None)
    }

    /// [`predict`](Self::predict) with an activation observer installed for the pass.
    pub fn predict_with(&self, image: &Grid<f64>, canny: &EdgeMap, observer: &mut Option<Observer>) -> Result<(Tensor, Option<Tensor>)> {
        let mut g = self.graph();
        g.observer = observer.take();
        let result = self.forward(&mut g, image, canny);
        *observer = g.observer.take();
        let out = result?;
        let edge = out.edge_pred.map(|e| g.value(e).clone());
        Ok((g.value(out.logits).clone(), edge))
    }

    pub fn segment(&self, image: &Grid<f64>, canny: &EdgeMap) -> Result<LabelMap> {
        let (logits, _) = self.predict(image, canny)?;
        let (_, h, w) = logits.dims3();
        LabelMap::new(vec![h, w], self.cfg.num_classes as u8, argmax_classes(&logits))
    }
}
