//! Multi-task objective: segmentation, edge supervision and shape regularization.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{EdgeMap, LabelMap, Sample};
use crate::model::ModelOutput;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const DICE_EPS: f64 = 1.0;
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeNorm {
    /// Mean absolute residual.
    #[default]
    L1,
    /// Mean squared residual.
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda4_activation_epoch: usize,
    pub shape_norm: ShapeNorm,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 0.1,
            lambda4_activation_epoch: 100,
            shape_norm: ShapeNorm::L1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(name, format!("must be a finite value ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Effective λ4 at `epoch`: zero before the activation epoch.
pub fn lambda_schedule(epoch: usize, weights: &LossWeights) -> f64 {
    if epoch < weights.lambda4_activation_epoch {
        0.0
    } else {
        weights.lambda4
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub seg: f64,
    pub edge: f64,
    pub sreg: f64,
    pub total: f64,
}

pub fn total_loss(epoch: usize, seg: f64, edge: f64, sreg: f64) -> LossReport {
    LossReport {
        epoch,
        seg,
        edge,
        sreg,
        total: seg + edge + sreg,
    }
}

pub fn one_hot(labels: &LabelMap, num_classes: usize) -> Tensor {
    let (h, w) = labels.plane();
    let mut t = Tensor::zeros(&[num_classes, h, w]);
    let hw = h * w;
    for (i, &l) in labels.labels().iter().enumerate() {
        t.data_mut()[l as usize * hw + i] = 1.0;
    }
    t
}

fn check_plane(g: &Graph, v: Var, labels_hw: (usize, usize), what: &str) -> Result<usize> {
    let s = g.shape(v);
    if s.len() != 3 || (s[1], s[2]) != labels_hw {
        return Err(Error::Shape(format!("{what} of shape {s:?} does not match a {labels_hw:?} label plane")));
    }
    Ok(s[0])
}

/// `1 − mean_c (2Σpg + ε)/(Σp + Σg + ε)` over the foreground classes.
pub fn dice_loss(g: &mut Graph, probs: Var, labels: &LabelMap) -> Result<Var> {
    let k = check_plane(g, probs, labels.plane(), "probabilities")?;
    if k < 2 || labels.classes() as usize > k {
        return Err(Error::Config(format!("dice needs ≥ 2 classes covering the labels, got {k}")));
    }
    let target = one_hot(labels, k);
    let (_, h, w) = target.dims3();
    let hw = h * w;
    let mut terms = Vec::with_capacity(k - 1);
    for c in 1..k {
        let gc = Tensor::new(vec![1, h, w], target.data()[c * hw..(c + 1) * hw].to_vec());
        let g_sum: f64 = gc.data().iter().sum();
        let pc = g.narrow(probs, c, 1);
        let inter = g.const_mul(pc, &gc);
        let inter = g.sum(inter);
        let num = g.scale(inter, 2.0);
        let num = g.add_scalar(num, DICE_EPS);
        let p_sum = g.sum(pc);
        let den = g.add_scalar(p_sum, g_sum + DICE_EPS);
        terms.push(g.div(num, den));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    let mean = g.scale(acc, -1.0 / (k - 1) as f64);
    Ok(g.add_scalar(mean, 1.0))
}

/// Mean per-pixel negative log-likelihood of the true class.
pub fn cross_entropy_loss(g: &mut Graph, logits: Var, labels: &LabelMap) -> Result<Var> {
    let k = check_plane(g, logits, labels.plane(), "logits")?;
    if labels.classes() as usize > k {
        return Err(Error::Config(format!("{} label classes but {k} logit channels", labels.classes())));
    }
    let target = one_hot(labels, k);
    let n = labels.labels().len() as f64;
    let lsm = g.log_softmax_channels(logits);
    let picked = g.const_mul(lsm, &target);
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / n))
}

/// Mean binary cross entropy with predictions clamped to `[1e-7, 1 − 1e-7]`.
pub fn edge_bce_loss(g: &mut Graph, pred: Var, label: &EdgeMap) -> Result<Var> {
    let hw = (label.values.height, label.values.width);
    let c = check_plane(g, pred, hw, "edge prediction")?;
    if c != 1 {
        return Err(Error::Shape(format!("edge prediction must have 1 channel, got {c}")));
    }
    let y = Tensor::new(vec![1, hw.0, hw.1], label.values.data.clone());
    let not_y = y.map(|v| 1.0 - v);
    let p = g.clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let log_p = g.log(p);
    let q = g.scale(p, -1.0);
    let q = g.add_scalar(q, 1.0);
    let log_q = g.log(q);
    let a = g.const_mul(log_p, &y);
    let b = g.const_mul(log_q, &not_y);
    let ll = g.add(a, b);
    let m = g.mean(ll);
    Ok(g.scale(m, -1.0))
}

/// Sum of the non-background logit channels, `1×H×W`.
pub fn foreground_sum(g: &mut Graph, logits: Var) -> Result<Var> {
    let k = g.shape(logits)[0];
    if k < 2 {
        return Err(Error::Config(format!("foreground sum needs K ≥ 2, got {k}")));
    }
    let fg = g.narrow(logits, 1, k - 1);
    Ok(g.sum_channels(fg))
}

/// `λ4 · mean |σ(fg(logits)) ⊙ e − e|`, or the mean square with [`ShapeNorm::L2`].
pub fn shape_regularization(g: &mut Graph, logits: Var, edge_pred: Var, lambda4: f64, norm: ShapeNorm) -> Result<Var> {
    let fg = foreground_sum(g, logits)?;
    if g.shape(fg) != g.shape(edge_pred) {
        return Err(Error::Shape(format!(
            "edge prediction {:?} does not match logits {:?}",
            g.shape(edge_pred),
            g.shape(logits)
        )));
    }
    if lambda4 == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let s = g.sigmoid(fg);
    let se = g.mul(s, edge_pred);
    let r = g.sub(se, edge_pred);
    let r = match norm {
        ShapeNorm::L1 => g.abs(r),
        ShapeNorm::L2 => g.mul(r, r),
    };
    let m = g.mean(r);
    Ok(g.scale(m, lambda4))
}

/// Weighted loss terms of one sample, still on the graph.
pub struct LossTerms {
    pub seg: Var,
    pub edge: Var,
    pub sreg: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn report(&self, g: &Graph, epoch: usize) -> LossReport {
        LossReport {
            epoch,
            seg: g.value(self.seg).item(),
            edge: g.value(self.edge).item(),
            sreg: g.value(self.sreg).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Full objective for one sample given the effective λ4.
pub fn multitask_loss(g: &mut Graph, out: &ModelOutput, sample: &Sample, w: &LossWeights, lambda4: f64) -> Result<LossTerms> {
    let probs = g.softmax_channels(out.logits);
    let dice = dice_loss(g, probs, &sample.labels)?;
    let ce = cross_entropy_loss(g, out.logits, &sample.labels)?;
    let dice = g.scale(dice, w.lambda1);
    let ce = g.scale(ce, w.lambda2);
    let seg = g.add(dice, ce);
    let (edge, sreg) = match out.edge_pred {
        Some(e) => {
            let bce = edge_bce_loss(g, e, &sample.edge_label)?;
            let edge = g.scale(bce, w.lambda3);
            let sreg = shape_regularization(g, out.logits, e, lambda4, w.shape_norm)?;
            (edge, sreg)
        }
        None => {
            let z = g.constant(Tensor::scalar(0.0));
            (z, z)
        }
    };
    let t = g.add(seg, edge);
    let total = g.add(t, sreg);
    Ok(LossTerms { seg, edge, sreg, total })
}
