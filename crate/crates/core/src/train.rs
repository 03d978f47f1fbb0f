//! SGD training, fine-tuning and ablation runs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::autograd::Graph;
use crate::data::{Dataset, Sample};
use crate::losses::{lambda_schedule, multitask_loss, LossReport, LossTerms, LossWeights};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{AblationFlags, ModelConfig, ModelOutput, TransFusionNet};
use crate::nn::{ParamId, ParamStore};
use crate::rng::{digest_hex, substream};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Schedule length the λ4 activation epoch refers to.
pub const REFERENCE_EPOCHS: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub ablation: AblationFlags,
    /// Scale the λ4 activation epoch by `epochs / 300` for short runs.
    pub scale_lambda4_activation: bool,
    /// Keep the encoder parameters fixed (fine-tuning only).
    pub freeze_encoders: bool,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 8,
            lr0: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            loss: LossWeights::default(),
            ablation: AblationFlags::default(),
            scale_lambda4_activation: true,
            freeze_encoders: false,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("epochs", "must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be ≥ 1"));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::validation("lr0", format!("must be > 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::validation("weight_decay", "must be ≥ 0"));
        }
        self.loss.validate()
    }

    /// Loss weights with the activation epoch this run actually uses.
    pub fn effective_loss(&self) -> LossWeights {
        let mut w = self.loss.clone();
        if self.scale_lambda4_activation && self.epochs < REFERENCE_EPOCHS {
            w.lambda4_activation_epoch = w.lambda4_activation_epoch * self.epochs / REFERENCE_EPOCHS;
        }
        w
    }
}

/// `lr0 · (1 + cos(π·step/total))/2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// Momentum SGD with L2 decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `v ← m·v + g + wd·θ; θ ← θ − lr·v` for every id in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, grad) in grads {
            let theta = store.value_mut(*id);
            let v = self.velocity[*id].get_or_insert_with(|| Tensor::zeros(theta.shape()));
            for ((vi, &gi), ti) in v.data_mut().iter_mut().zip(grad.data()).zip(theta.data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *ti;
                *ti -= lr * *vi;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub report: LossReport,
    pub lr: f64,
    pub lambda4: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Mean total loss of every optimizer step.
    pub step_losses: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,seg,edge,sreg,total,lr,lambda4\n");
        for e in &self.epochs {
            let r = &e.report;
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.epoch, r.seg, r.edge, r.sreg, r.total, e.lr, e.lambda4);
        }
        s
    }

    pub fn digest(&self) -> String {
        digest_hex(self.to_csv().as_bytes())
    }
}

/// Names of parameters updated under `cfg`.
fn trainable(store: &ParamStore, cfg: &TrainConfig) -> Vec<bool> {
    store
        .names()
        .map(|n| !(cfg.freeze_encoders && (n.starts_with("semantic.") || n.starts_with("local."))))
        .collect()
}

/// Loss of one sample: graph, forward output, sample, its dataset index and the effective λ4.
pub type Objective<'o> = dyn Fn(&mut Graph, &ModelOutput, &Sample, usize, f64) -> Result<LossTerms> + 'o;

/// Averaged loss gradients of one mini-batch under the multi-task objective.
pub fn batch_gradients(
    net: &TransFusionNet,
    dataset: &Dataset,
    batch: &[usize],
    loss: &LossWeights,
    lambda4: f64,
    epoch: usize,
    dropout_seed: u64,
) -> Result<(Vec<(ParamId, Tensor)>, LossReport)> {
    let objective = |g: &mut Graph, out: &ModelOutput, s: &Sample, _: usize, l4: f64| multitask_loss(g, out, s, loss, l4);
    batch_gradients_with(net, dataset, batch, &objective, lambda4, epoch, dropout_seed)
}

pub fn batch_gradients_with(
    net: &TransFusionNet,
    dataset: &Dataset,
    batch: &[usize],
    objective: &Objective,
    lambda4: f64,
    epoch: usize,
    dropout_seed: u64,
) -> Result<(Vec<(ParamId, Tensor)>, LossReport)> {
    let mut acc: HashMap<ParamId, Tensor> = HashMap::new();
    let mut sum = LossReport { epoch, seg: 0.0, edge: 0.0, sreg: 0.0, total: 0.0 };
    for &i in batch {
        let s = &dataset.samples[i];
        let mut g = net.graph();
        g.training = true;
        g.rng = Some(substream(dropout_seed, "dropout", i as u64));
        let out = net.forward(&mut g, &s.image, &s.canny)?;
        let terms = objective(&mut g, &out, s, i, lambda4)?;
        let r = terms.report(&g, epoch);
        if !r.total.is_finite() {
            return Err(Error::Diverged { epoch, batch: usize::MAX });
        }
        sum.seg += r.seg;
        sum.edge += r.edge;
        sum.sreg += r.sreg;
        sum.total += r.total;
        for (id, t) in g.backward(terms.total).into_params() {
            match acc.get_mut(&id) {
                Some(a) => a.add_assign(&t),
                None => {
                    acc.insert(id, t);
                }
            }
        }
    }
    let k = 1.0 / batch.len() as f64;
    let mut grads: Vec<(ParamId, Tensor)> = acc.into_iter().collect();
    grads.sort_by_key(|(id, _)| *id);
    for (_, t) in &mut grads {
        t.scale_assign(k);
    }
    let report = LossReport {
        epoch,
        seg: sum.seg * k,
        edge: sum.edge * k,
        sreg: sum.sreg * k,
        total: sum.total * k,
    };
    Ok((grads, report))
}

/// Trains `net` in place and returns the per-epoch log.
pub fn fit(net: &mut TransFusionNet, cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainLog> {
    let loss = cfg.effective_loss();
    let objective = |g: &mut Graph, out: &ModelOutput, s: &Sample, _: usize, l4: f64| multitask_loss(g, out, s, &loss, l4);
    fit_with(net, cfg, dataset, &objective)
}

/// [`fit`] with a custom per-sample objective.
pub fn fit_with(net: &mut TransFusionNet, cfg: &TrainConfig, dataset: &Dataset, objective: &Objective) -> Result<TrainLog> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::validation("dataset", "training set is empty"));
    }
    let loss = cfg.effective_loss();
    let n = dataset.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mask = trainable(&net.store, cfg);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lambda4 = lambda_schedule(epoch, &loss);
        let mut order: Vec<usize> = (0..n).collect();
        if cfg.shuffle {
            order.shuffle(&mut substream(cfg.seed, "shuffle", epoch as u64));
        }
        let epoch_lr = cosine_lr(step, total_steps, cfg.lr0);
        let mut sum = LossReport { epoch, seg: 0.0, edge: 0.0, sreg: 0.0, total: 0.0 };
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let lr = cosine_lr(step, total_steps, cfg.lr0);
            let dropout_seed = crate::rng::derive_seed(cfg.seed, "dropout-step", step as u64);
            let (grads, r) = batch_gradients_with(net, dataset, batch, objective, lambda4, epoch, dropout_seed)
                .map_err(|e| match e {
                    Error::Diverged { .. } => Error::Diverged { epoch, batch: b },
                    e => e,
                })?;
            if grads.iter().any(|(_, t)| !t.all_finite()) {
                return Err(Error::Diverged { epoch, batch: b });
            }
            let grads: Vec<(ParamId, Tensor)> = grads.into_iter().filter(|(id, _)| mask[*id]).collect();
            sgd.step(&mut net.store, &grads, lr);
            let w = batch.len() as f64;
            sum.seg += r.seg * w;
            sum.edge += r.edge * w;
            sum.sreg += r.sreg * w;
            sum.total += r.total * w;
            log.step_losses.push(r.total);
            step += 1;
        }
        let k = 1.0 / n as f64;
        log.epochs.push(EpochLog {
            report: LossReport {
                epoch,
                seg: sum.seg * k,
                edge: sum.edge * k,
                sreg: sum.sreg * k,
                total: sum.total * k,
            },
            lr: epoch_lr,
            lambda4,
        });
    }
    Ok(log)
}

/// Trains a fresh network initialised from the `init` stream of `train_cfg.seed`.
pub fn train(model_cfg: &ModelConfig, train_cfg: &TrainConfig, dataset: &Dataset) -> Result<(Checkpoint, TrainLog)> {
    let cfg = model_cfg.effective(&train_cfg.ablation);
    let mut net = TransFusionNet::new(&cfg, train_cfg.seed)?;
    let log = fit(&mut net, train_cfg, dataset)?;
    let ck = Checkpoint::from_model(&net, train_cfg, train_cfg.epochs, log.digest(), None);
    Ok((ck, log))
}

/// Continues training from `base`; the result records the digest of `base`.
pub fn finetune(base: &Checkpoint, model_cfg: &ModelConfig, train_cfg: &TrainConfig, dataset: &Dataset) -> Result<(Checkpoint, TrainLog)> {
    let cfg = model_cfg.effective(&train_cfg.ablation);
    let mut net = TransFusionNet::new(&cfg, train_cfg.seed)?;
    net.store.load_from(&base.params)?;
    let provenance = Some(base.digest()?);
    if train_cfg.epochs == 0 {
        let ck = Checkpoint::from_model(&net, train_cfg, base.epoch, TrainLog::default().digest(), provenance);
        return Ok((ck, TrainLog::default()));
    }
    let log = fit(&mut net, train_cfg, dataset)?;
    let ck = Checkpoint::from_model(&net, train_cfg, base.epoch + train_cfg.epochs, log.digest(), provenance);
    Ok((ck, log))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoSemanticSkips,
    NoLocalSkips,
    NoAllSkips,
    NoEdgeModule,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoSemanticSkips,
        Variant::NoLocalSkips,
        Variant::NoAllSkips,
        Variant::NoEdgeModule,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSemanticSkips => "no_semantic_skips",
            Variant::NoLocalSkips => "no_local_skips",
            Variant::NoAllSkips => "no_all_skips",
            Variant::NoEdgeModule => "no_edge_module",
        }
    }

    pub fn flags(self) -> AblationFlags {
        let mut f = AblationFlags::default();
        match self {
            Variant::Full => {}
            Variant::NoSemanticSkips => f.disable_semantic_skips = true,
            Variant::NoLocalSkips => f.disable_local_skips = true,
            Variant::NoAllSkips => f.disable_all_skips = true,
            Variant::NoEdgeModule => f.disable_edge_module = true,
        }
        f
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::validation("variant", format!("unknown variant {s:?}; expected one of full, no_semantic_skips, no_local_skips, no_all_skips, no_edge_module")))
    }
}

/// Trains `variant` on `train_set` and evaluates it on `test_set`.
pub fn run_ablation(variant: Variant, model_cfg: &ModelConfig, train_cfg: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<MetricsReport> {
    let cfg = TrainConfig {
        ablation: variant.flags(),
        ..train_cfg.clone()
    };
    let (ck, _) = train(model_cfg, &cfg, train_set)?;
    let net = ck.build()?;
    evaluate(&net, test_set, model_cfg.num_classes, "test", variant.name())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, CannyParams, PhantomSpec};

    #[test]
    fn cosine_examples_and_monotonicity() {
        assert_eq!(cosine_lr(0, 100, 0.001), 0.001);
        assert!(cosine_lr(100, 100, 0.001).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.001) - 0.0005).abs() < 1e-15);
        assert!((0..100).all(|s| cosine_lr(s + 1, 100, 1.0) <= cosine_lr(s, 100, 1.0)));
    }

    #[test]
    fn sgd_matches_closed_form_on_a_quadratic() {
        // f(θ) = θ²/2, gradient θ.
        let (m, wd, lr) = (0.9, 0.1, 0.05);
        let mut store = ParamStore::new();
        let id = store.add("w".into(), crate::nn::ParamKind::Bias, Tensor::scalar(1.0));
        let mut sgd = Sgd::new(m, wd);
        let (mut theta, mut v) = (1.0f64, 0.0f64);
        for _ in 0..20 {
            let g = store.value(id).item();
            sgd.step(&mut store, &[(id, Tensor::scalar(g))], lr);
            v = m * v + theta + wd * theta;
            theta -= lr * v;
            assert_eq!(store.value(id).item(), theta);
        }
        // Linear recurrence [θ, v] ← A [θ, v] with A = [[1 − lr·c, −lr·m], [c, m]], c = 1 + wd.
        let c = 1.0 + wd;
        let (mut a, mut b) = (1.0f64, 0.0f64);
        for _ in 0..20 {
            let nb = c * a + m * b;
            a -= lr * nb;
            b = nb;
        }
        assert!((a - theta).abs() < 1e-15);
    }

    #[test]
    fn activation_epoch_scales_with_short_runs() {
        let cfg = TrainConfig { epochs: 6, ..Default::default() };
        assert_eq!(cfg.effective_loss().lambda4_activation_epoch, 2);
        let cfg = TrainConfig { epochs: 300, ..Default::default() };
        assert_eq!(cfg.effective_loss().lambda4_activation_epoch, 100);
        let cfg = TrainConfig { epochs: 6, scale_lambda4_activation: false, ..Default::default() };
        assert_eq!(cfg.effective_loss().lambda4_activation_epoch, 100);
    }

    #[test]
    fn variants_parse_and_reject_unknown() {
        assert_eq!(Variant::ALL.len(), 5);
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("no_decoder".parse::<Variant>(), Err(Error::Validation { .. })));
    }

    fn tiny() -> (ModelConfig, Dataset) {
        let mut cfg = ModelConfig::with_base_width(2);
        cfg.input_size = 32;
        let spec = PhantomSpec {
            n_slices: 2,
            height: 32,
            width: 32,
            tumor_radius_range: (4, 7),
            seed: 1,
            ..PhantomSpec::default()
        };
        let (v, l) = generate_phantom(&spec).unwrap();
        (cfg, Dataset::from_volumes(&[(v, l)], CannyParams::default()).unwrap())
    }

    #[test]
    fn one_step_updates_every_parameter_with_gradient() {
        let (cfg, ds) = tiny();
        let ds = ds.subset(0..1);
        let tc = TrainConfig { epochs: 1, batch_size: 1, lr0: 0.01, loss: LossWeights { lambda4_activation_epoch: 0, ..Default::default() }, ..Default::default() };
        let mut net = TransFusionNet::new(&cfg, tc.seed).unwrap();
        let before = net.store.clone();
        let (grads, _) = batch_gradients(&net, &ds, &[0], &tc.effective_loss(), 0.1, 0, 0).unwrap();
        fit(&mut net, &tc, &ds).unwrap();
        let mut changed = 0;
        for (id, g) in &grads {
            if g.max_abs() > 0.0 {
                assert_ne!(net.store.value(*id), before.value(*id), "{}", before.entry(*id).name);
                changed += 1;
            }
        }
        assert_eq!(grads.len(), before.len());
        assert!(changed > before.len() / 2);
    }

    #[test]
    fn same_seed_gives_identical_checkpoints() {
        let (cfg, ds) = tiny();
        let tc = TrainConfig { epochs: 2, batch_size: 2, lr0: 0.01, seed: 4, ..Default::default() };
        let (a, la) = train(&cfg, &tc, &ds).unwrap();
        let (b, lb) = train(&cfg, &tc, &ds).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let (c, _) = train(&cfg, &TrainConfig { seed: 5, ..tc }, &ds).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn schedule_shows_in_the_log() {
        let (cfg, ds) = tiny();
        let ds = ds.subset(0..1);
        let tc = TrainConfig { epochs: 6, batch_size: 1, lr0: 0.01, ..Default::default() };
        let (_, log) = train(&cfg, &tc, &ds).unwrap();
        let l4: Vec<f64> = log.epochs.iter().map(|e| e.lambda4).collect();
        assert_eq!(l4, vec![0.0, 0.0, 0.1, 0.1, 0.1, 0.1]);
        assert!(log.epochs[..2].iter().all(|e| e.report.sreg == 0.0));
        assert!(log.epochs[2..].iter().all(|e| e.report.sreg > 0.0));
        assert!(log.to_csv().starts_with("epoch,seg,edge,sreg,total,lr,lambda4\n"));
    }

    #[test]
    fn finetune_contracts() {
        let (cfg, ds) = tiny();
        let tc = TrainConfig { epochs: 1, batch_size: 2, lr0: 0.01, ..Default::default() };
        let (base, _) = train(&cfg, &tc, &ds).unwrap();
        let (same, _) = finetune(&base, &cfg, &TrainConfig { epochs: 0, ..tc.clone() }, &ds).unwrap();
        assert_eq!(same.params, base.params);
        assert_eq!(same.provenance, Some(base.digest().unwrap()));

        let frozen = TrainConfig { freeze_encoders: true, ..tc.clone() };
        let (ft, _) = finetune(&base, &cfg, &frozen, &ds).unwrap();
        for e in base.params.entries() {
            let moved = ft.params.by_name(&e.name).unwrap() != &e.value;
            let encoder = e.name.starts_with("semantic.") || e.name.starts_with("local.");
            assert!(!(encoder && moved), "{}", e.name);
        }

        let other = ModelConfig { num_classes: 4, ..cfg.clone() };
        assert!(finetune(&base, &other, &tc, &ds).is_err());
        let no_edge = TrainConfig { ablation: Variant::NoEdgeModule.flags(), ..tc };
        assert!(matches!(finetune(&base, &cfg, &no_edge, &ds), Err(Error::Incompatible { .. })));
    }

    #[test]
    fn divergence_is_reported() {
        let (cfg, ds) = tiny();
        let tc = TrainConfig { epochs: 3, batch_size: 1, lr0: 1e300, ..Default::default() };
        match train(&cfg, &tc, &ds) {
            Err(Error::Diverged { epoch, batch }) => assert!(epoch < 3 && batch < 2),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }
}
