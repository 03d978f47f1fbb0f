//! Post-training int8 quantization, logit distillation and model comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Observer, Var};
use crate::checkpoint::{decode_f32, encode_f32, read_archive, tensor_bytes, write_archive, Checkpoint, DType, TensorRecord};
use crate::data::{Dataset, EdgeMap, Grid, LabelMap, Sample};
use crate::fusion_decoder::argmax_classes;
use crate::losses::multitask_loss;
use crate::metrics::{evaluate, ClassMetrics, MetricsReport, Segmenter, METRIC_COLUMNS};
use crate::model::{ModelConfig, ModelOutput, TransFusionNet};
use crate::nn::ParamStore;
use crate::rng::digest_hex;
use crate::tensor::Tensor;
use crate::train::{fit_with, TrainConfig, TrainLog};
use crate::{Error, Result};

pub const QMAX: f64 = 127.0;

/// Symmetric per-output-channel int8 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub values: Vec<i8>,
    pub shape: Vec<usize>,
    /// Largest magnitude of each channel along axis 0.
    pub absmax: Vec<f64>,
}

impl QuantizedTensor {
    pub fn quantize(t: &Tensor) -> Self {
        let channels = t.shape().first().copied().unwrap_or(1).max(1);
        let per = t.len() / channels;
        let mut values = Vec::with_capacity(t.len());
        let mut absmax = Vec::with_capacity(channels);
        for chunk in t.data().chunks(per.max(1)) {
            let m = chunk.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            let m = if m > 0.0 { m } else { 1.0 };
            values.extend(chunk.iter().map(|&v| (v * QMAX / m).round().clamp(-QMAX, QMAX) as i8));
            absmax.push(m);
        }
        QuantizedTensor {
            values,
            shape: t.shape().to_vec(),
            absmax,
        }
    }

    /// Step size of each channel.
    pub fn scales(&self) -> Vec<f64> {
        self.absmax.iter().map(|m| m / QMAX).collect()
    }

    pub fn dequantize(&self) -> Tensor {
        let per = self.values.len() / self.absmax.len();
        let data = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &q)| q as f64 * self.absmax[i / per.max(1)] / QMAX)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

/// Int8 weights, full-precision norms and biases, and activation ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub model: ModelConfig,
    pub source_digest: String,
    pub quantized: BTreeMap<String, QuantizedTensor>,
    /// Parameters kept in floating point.
    pub float_params: ParamStore,
    pub activation_ranges: BTreeMap<String, (f64, f64)>,
    /// Parameter order of the source checkpoint.
    order: Vec<String>,
    kinds: Vec<crate::nn::ParamKind>,
}

/// Min/max of every tapped activation over `calibration`.
pub fn calibrate(net: &TransFusionNet, calibration: &Dataset) -> Result<BTreeMap<String, (f64, f64)>> {
    if calibration.is_empty() {
        return Err(Error::validation("calibration", "calibration set is empty"));
    }
    let mut obs = Some(Observer::Record(BTreeMap::new()));
    for s in &calibration.samples {
        net.predict_with(&s.image, &s.canny, &mut obs)?;
    }
    match obs {
        Some(Observer::Record(r)) => Ok(r),
        _ => unreachable!("observer is restored after each pass"),
    }
}

pub fn quantize_checkpoint(ck: &Checkpoint, calibration: &Dataset) -> Result<QuantizedModel> {
    let net = ck.build()?;
    let activation_ranges = calibrate(&net, calibration)?;
    let mut quantized = BTreeMap::new();
    let mut float_params = ParamStore::new();
    for e in ck.params.entries() {
        if e.kind.is_quantizable() {
            quantized.insert(e.name.clone(), QuantizedTensor::quantize(&e.value));
        } else {
            float_params.add(e.name.clone(), e.kind, e.value.clone());
        }
    }
    Ok(QuantizedModel {
        model: ck.model.clone(),
        source_digest: ck.digest()?,
        quantized,
        float_params,
        activation_ranges,
        order: ck.params.names().map(String::from).collect(),
        kinds: ck.params.entries().iter().map(|e| e.kind).collect(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantManifest {
    kind: String,
    model: ModelConfig,
    source_digest: String,
    activation_ranges: BTreeMap<String, (f64, f64)>,
    tensors: Vec<TensorRecord>,
    absmax: BTreeMap<String, Vec<f64>>,
}

impl QuantizedModel {
    /// Parameters with int8 tensors replaced by their dequantized values.
    pub fn dequantized_params(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, &kind) in self.order.iter().zip(&self.kinds) {
            let t = match self.quantized.get(name) {
                Some(q) => q.dequantize(),
                None => self.float_params.by_name(name).expect("every parameter is kept").clone(),
            };
            store.add(name.clone(), kind, t);
        }
        store
    }

    pub fn fake_quant(&self) -> Result<FakeQuantModel> {
        let mut net = TransFusionNet::new(&self.model, 0)?;
        net.store.load_from(&self.dequantized_params())?;
        Ok(FakeQuantModel {
            net,
            ranges: self.activation_ranges.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        let mut floats = self.float_params.entries().iter();
        for (name, &kind) in self.order.iter().zip(&self.kinds) {
            match self.quantized.get(name) {
                Some(q) => {
                    tensors.push(TensorRecord {
                        name: name.clone(),
                        kind,
                        shape: q.shape.clone(),
                        dtype: DType::I8,
                        offset: payload.len(),
                    });
                    payload.extend(q.values.iter().map(|&v| v as u8));
                }
                None => {
                    let e = floats.next().expect("float parameters follow source order");
                    let mut one = ParamStore::new();
                    one.add(e.name.clone(), e.kind, e.value.clone());
                    tensors.extend(encode_f32(&one, &mut payload));
                }
            }
        }
        let m = QuantManifest {
            kind: "quantized".into(),
            model: self.model.clone(),
            source_digest: self.source_digest.clone(),
            activation_ranges: self.activation_ranges.clone(),
            tensors,
            absmax: self.quantized.iter().map(|(k, q)| (k.clone(), q.absmax.clone())).collect(),
        };
        write_archive(&m, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (m, payload): (QuantManifest, _) = read_archive(bytes)?;
        if m.kind != "quantized" {
            return Err(Error::Format(format!("archive holds a {}, not a quantized model", m.kind)));
        }
        let mut quantized = BTreeMap::new();
        let mut float_params = ParamStore::new();
        for rec in &m.tensors {
            match rec.dtype {
                DType::I8 => {
                    let absmax = m
                        .absmax
                        .get(&rec.name)
                        .cloned()
                        .ok_or_else(|| Error::Format(format!("no scales for {}", rec.name)))?;
                    let values = tensor_bytes(rec, payload)?.iter().map(|&b| b as i8).collect();
                    quantized.insert(
                        rec.name.clone(),
                        QuantizedTensor {
                            values,
                            shape: rec.shape.clone(),
                            absmax,
                        },
                    );
                }
                DType::F32 => {
                    float_params.add(rec.name.clone(), rec.kind, decode_f32(rec, payload)?);
                }
            }
        }
        Ok(QuantizedModel {
            model: m.model,
            source_digest: m.source_digest,
            quantized,
            float_params,
            activation_ranges: m.activation_ranges,
            order: m.tensors.iter().map(|r| r.name.clone()).collect(),
            kinds: m.tensors.iter().map(|r| r.kind).collect(),
        })
    }
}

/// Dequantized weights with 8-bit fake-quantized activations.
#[derive(Clone, Debug)]
pub struct FakeQuantModel {
    pub net: TransFusionNet,
    pub ranges: BTreeMap<String, (f64, f64)>,
}

impl FakeQuantModel {
    pub fn predict(&self, sample: &Sample) -> Result<Tensor> {
        self.predict_image(&sample.image, &sample.canny)
    }

    pub fn predict_image(&self, image: &Grid<f64>, canny: &EdgeMap) -> Result<Tensor> {
        let mut obs = Some(Observer::Apply(self.ranges.clone()));
        Ok(self.net.predict_with(image, canny, &mut obs)?.0)
    }
}

impl Segmenter for FakeQuantModel {
    fn segment_sample(&self, sample: &Sample) -> Result<LabelMap> {
        let logits = self.predict(sample)?;
        let (_, h, w) = logits.dims3();
        LabelMap::new(vec![h, w], self.net.cfg.num_classes as u8, argmax_classes(&logits))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Weight of the KL term; the hard-label loss gets `1 − kd_weight`.
    pub kd_weight: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 2.0,
            kd_weight: 0.5,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::validation("temperature", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.kd_weight) {
            return Err(Error::validation("kd_weight", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `Σ p ln(p/q)` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| a * (a / b).ln()).sum()
}

/// Per-channel softmax of `logits / T`.
pub fn soften(logits: &Tensor, temperature: f64) -> Tensor {
    crate::autograd::softmax_channels(&logits.map(|v| v / temperature))
}

/// Mean per-pixel `KL(teacher ‖ softmax(student / T))`.
pub fn distill_kl(g: &mut Graph, student_logits: Var, teacher_soft: &Tensor, temperature: f64) -> Result<Var> {
    if g.shape(student_logits) != teacher_soft.shape() {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher {:?}",
            g.shape(student_logits),
            teacher_soft.shape()
        )));
    }
    let (_, h, w) = teacher_soft.dims3();
    let pixels = (h * w) as f64;
    let neg_entropy: f64 = teacher_soft.data().iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
    let s = g.scale(student_logits, 1.0 / temperature);
    let ls = g.log_softmax_channels(s);
    let cross = g.const_mul(ls, teacher_soft);
    let cross = g.sum(cross);
    let kl = g.scale(cross, -1.0);
    let kl = g.add_scalar(kl, neg_entropy);
    Ok(g.scale(kl, 1.0 / pixels))
}

pub struct DistillOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub warnings: Vec<String>,
}

/// Trains a student on `(1 − w)·(multi-task loss) + w·KL` against the softened teacher.
pub fn distill(teacher: &Checkpoint, student_cfg: &ModelConfig, train_cfg: &TrainConfig, kd: &DistillConfig, dataset: &Dataset) -> Result<DistillOutcome> {
    kd.validate()?;
    let teacher_net = teacher.build()?;
    let cfg = student_cfg.effective(&train_cfg.ablation);
    let mut student = TransFusionNet::new(&cfg, train_cfg.seed)?;
    let mut warnings = Vec::new();
    if student.store.scalar_count() >= teacher_net.store.scalar_count() {
        warnings.push(format!(
            "student has {} parameters, not fewer than the teacher's {}",
            student.store.scalar_count(),
            teacher_net.store.scalar_count()
        ));
    }
    let soft: Vec<Tensor> = dataset
        .samples
        .iter()
        .map(|s| Ok(soften(&teacher_net.predict(&s.image, &s.canny)?.0, kd.temperature)))
        .collect::<Result<_>>()?;
    let loss = train_cfg.effective_loss();
    let objective = |g: &mut Graph, out: &ModelOutput, s: &Sample, i: usize, l4: f64| {
        let mut terms = multitask_loss(g, out, s, &loss, l4)?;
        if kd.kd_weight > 0.0 {
            let kl = distill_kl(g, out.logits, &soft[i], kd.temperature)?;
            let hard = g.scale(terms.total, 1.0 - kd.kd_weight);
            let kl = g.scale(kl, kd.kd_weight);
            terms.total = g.add(hard, kl);
        }
        Ok(terms)
    };
    let log = fit_with(&mut student, train_cfg, dataset, &objective)?;
    let checkpoint = Checkpoint::from_model(&student, train_cfg, train_cfg.epochs, log.digest(), Some(teacher.digest()?));
    Ok(DistillOutcome { checkpoint, log, warnings })
}

/// Metrics of two models on one dataset, `b − a` deltas and per-slice timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: MetricsReport,
    pub b: MetricsReport,
    /// `b − a` for every class row and the mean row.
    pub deltas: Vec<ClassMetrics>,
    pub seconds_per_slice_a: f64,
    pub seconds_per_slice_b: f64,
}

fn delta(a: &ClassMetrics, b: &ClassMetrics) -> ClassMetrics {
    ClassMetrics {
        class: a.class,
        iou: b.iou - a.iou,
        dsc: b.dsc - a.dsc,
        voe: b.voe - a.voe,
        precision: b.precision - a.precision,
        recall: b.recall - a.recall,
        precision_std: b.precision_std - a.precision_std,
        precision_undefined: a.precision_undefined || b.precision_undefined,
    }
}

fn timed(model: &dyn Segmenter, dataset: &Dataset, k: usize, tag: &str) -> Result<(MetricsReport, f64)> {
    let start = Instant::now();
    let r = evaluate(model, dataset, k, "compare", tag)?;
    Ok((r, start.elapsed().as_secs_f64() / dataset.len() as f64))
}

pub fn compare_models(a: &dyn Segmenter, a_tag: &str, b: &dyn Segmenter, b_tag: &str, dataset: &Dataset, num_classes: usize) -> Result<Comparison> {
    let (ra, ta) = timed(a, dataset, num_classes, a_tag)?;
    let (rb, tb) = timed(b, dataset, num_classes, b_tag)?;
    let mut deltas: Vec<ClassMetrics> = ra.per_class.iter().zip(&rb.per_class).map(|(x, y)| delta(x, y)).collect();
    deltas.push(delta(&ra.mean, &rb.mean));
    Ok(Comparison {
        a: ra,
        b: rb,
        deltas,
        seconds_per_slice_a: ta,
        seconds_per_slice_b: tb,
    })
}

impl Comparison {
    pub fn mean_delta(&self) -> &ClassMetrics {
        self.deltas.last().expect("mean row")
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.a.to_csv();
        s.push_str(self.b.to_csv().split_once('\n').map_or("", |x| x.1));
        for d in &self.deltas {
            let name = d.class.map_or("mean".to_string(), crate::metrics::class_name);
            let _ = writeln!(
                s,
                "delta,{}-{},{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                self.b.model, self.a.model, d.iou, d.dsc, d.voe, d.precision, d.recall, d.precision_std
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = self.a.to_table();
        s.push_str(&self.b.to_table());
        let _ = writeln!(s, "delta ({} − {})", self.b.model, self.a.model);
        let _ = write!(s, "{:<10}", "class");
        for c in METRIC_COLUMNS {
            let _ = write!(s, "{c:>14}");
        }
        s.push('\n');
        for d in &self.deltas {
            let name = d.class.map_or("mean".to_string(), crate::metrics::class_name);
            let _ = write!(s, "{name:<10}");
            for v in [d.iou, d.dsc, d.voe, d.precision, d.recall, d.precision_std] {
                let _ = write!(s, "{v:>+14.4}");
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "seconds per slice: {} {:.4}, {} {:.4}",
            self.a.model, self.seconds_per_slice_a, self.b.model, self.seconds_per_slice_b
        );
        s
    }
}

/// SHA-256 of a quantized archive.
pub fn quantized_digest(q: &QuantizedModel) -> Result<String> {
    Ok(digest_hex(&q.to_bytes()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, CannyParams, PhantomSpec};
    use crate::train::train;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_tensor_is_exact() {
        let t = Tensor::full(&[4, 3, 3, 3], 0.5);
        let q = QuantizedTensor::quantize(&t);
        assert!(q.values.iter().all(|&v| v == 127));
        assert_eq!(q.dequantize(), t);
        let z = QuantizedTensor::quantize(&Tensor::zeros(&[2, 5]));
        assert!(z.scales().iter().all(|&s| s > 0.0));
        assert_eq!(z.dequantize(), Tensor::zeros(&[2, 5]));
    }

    #[test]
    fn rounding_bound_idempotence_and_mse_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::from_fn(&[8, 8], |_| rng.random_range(-2.0..2.0));
        let q = QuantizedTensor::quantize(&t);
        let d = q.dequantize();
        let scales = q.scales();
        for (i, (&w, &v)) in t.data().iter().zip(d.data()).enumerate() {
            assert!((w - v).abs() <= scales[i / 8] / 2.0 + 1e-15);
        }
        assert_eq!(QuantizedTensor::quantize(&d).values, q.values);

        let mut mse = 0.0;
        for row in t.data().chunks(8) {
            let m = row.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            for &w in row {
                let r = (w / (m / 127.0)).round() * (m / 127.0);
                mse += (w - r).powi(2);
            }
        }
        mse /= 64.0;
        let got: f64 = t.data().iter().zip(d.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 64.0;
        assert!((got - mse).abs() < 1e-12 * mse.max(1e-30) + 1e-20);
    }

    #[test]
    fn kl_oracle_and_zero_self_distillation() {
        let kl = kl_divergence(&[0.8, 0.2], &[0.6, 0.4]);
        let want = 0.8 * (0.8f64 / 0.6).ln() + 0.2 * (0.2f64 / 0.4).ln();
        assert!((kl - want).abs() < 1e-15);
        assert!((kl - 0.0915).abs() < 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = Tensor::from_fn(&[3, 4, 4], |_| rng.random_range(-3.0..3.0));
        let soft = soften(&logits, 2.0);
        let mut g = Graph::detached();
        let s = g.constant(logits.clone());
        let v = distill_kl(&mut g, s, &soft, 2.0).unwrap();
        assert!(g.value(v).item().abs() < 1e-12);
        let other = g.constant(logits.map(|x| -x));
        let v = distill_kl(&mut g, other, &soft, 2.0).unwrap();
        assert!(g.value(v).item() > 0.0);
    }

    fn tiny() -> (ModelConfig, Dataset) {
        let mut cfg = ModelConfig::with_base_width(2);
        cfg.input_size = 32;
        let spec = PhantomSpec {
            n_slices: 2,
            height: 32,
            width: 32,
            tumor_radius_range: (4, 7),
            seed: 2,
            ..PhantomSpec::default()
        };
        let (v, l) = generate_phantom(&spec).unwrap();
        (cfg, Dataset::from_volumes(&[(v, l)], CannyParams::default()).unwrap())
    }

    #[test]
    fn quantized_model_round_trips_and_runs() {
        let (cfg, ds) = tiny();
        let tc = TrainConfig { epochs: 1, batch_size: 2, lr0: 0.01, ..Default::default() };
        let (ck, _) = train(&cfg, &tc, &ds).unwrap();
        assert!(quantize_checkpoint(&ck, &ds.subset(0..0)).is_err());
        let q = quantize_checkpoint(&ck, &ds).unwrap();
        assert_eq!(q.source_digest, ck.digest().unwrap());
        assert!(q.activation_ranges.keys().any(|k| k.starts_with("decoder.stage")));
        let bytes = q.to_bytes().unwrap();
        let back = QuantizedModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, q);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let fq = q.fake_quant().unwrap();
        let cmp = compare_models(&ck.build().unwrap(), "float", &fq, "int8", &ds, 3).unwrap();
        assert_eq!(cmp.deltas.len(), 3);
        assert!(cmp.to_table().contains("seconds per slice"));
    }

    #[test]
    fn comparison_is_reflexive_and_antisymmetric() {
        let (cfg, ds) = tiny();
        let a = TransFusionNet::new(&cfg, 1).unwrap();
        let b = TransFusionNet::new(&cfg, 2).unwrap();
        let same = compare_models(&a, "a", &a, "a", &ds, 3).unwrap();
        for d in &same.deltas {
            assert_eq!([d.iou, d.dsc, d.voe, d.precision, d.recall], [0.0; 5]);
        }
        let ab = compare_models(&a, "a", &b, "b", &ds, 3).unwrap();
        let ba = compare_models(&b, "b", &a, "a", &ds, 3).unwrap();
        for (x, y) in ab.deltas.iter().zip(&ba.deltas) {
            assert_eq!(x.dsc, -y.dsc);
            assert_eq!(x.voe, -y.voe);
        }
        let csv = ab.to_csv();
        assert!(csv.lines().filter(|l| l.starts_with("delta,")).count() == 3);
    }

    #[test]
    fn zero_weight_distillation_is_plain_training() {
        let (cfg, ds) = tiny();
        let tc = TrainConfig { epochs: 1, batch_size: 2, lr0: 0.01, ..Default::default() };
        let (teacher, _) = train(&cfg, &tc, &ds).unwrap();
        let kd = DistillConfig { temperature: 1.0, kd_weight: 0.0 };
        let out = distill(&teacher, &cfg, &tc, &kd, &ds).unwrap();
        let (plain, _) = train(&cfg, &tc, &ds).unwrap();
        assert_eq!(out.checkpoint.params, plain.params);
        assert_eq!(out.checkpoint.provenance, Some(teacher.digest().unwrap()));
        assert_eq!(out.warnings.len(), 1);

        let small = ModelConfig::with_base_width(1);
        let small = ModelConfig { input_size: 32, ..small };
        let out = distill(&teacher, &small, &tc, &DistillConfig::default(), &ds).unwrap();
        assert!(out.warnings.is_empty());
        assert!(out.log.epochs[0].report.total.is_finite());
    }
}
