//! Overlap metrics on integer pixel counts and evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelMap, Sample};
use crate::model::TransFusionNet;
use crate::{Error, Result};

/// Exact ratio of two counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fraction {
    pub num: i64,
    pub den: i64,
}

impl Fraction {
    pub fn new(num: i64, den: i64) -> Self {
        Fraction { num, den }
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Equality as rationals.
    pub fn same_as(self, other: Fraction) -> bool {
        self.num as i128 * other.den as i128 == other.num as i128 * self.den as i128
    }
}

/// Binary confusion counts of one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn from_masks(pred: &[bool], real: &[bool]) -> Result<Self> {
        if pred.len() != real.len() {
            return Err(Error::Shape(format!("mask sizes differ: {} vs {}", pred.len(), real.len())));
        }
        let mut c = Counts::default();
        for (&p, &r) in pred.iter().zip(real) {
            match (p, r) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn from_labels(pred: &LabelMap, real: &LabelMap, class: u8) -> Result<Self> {
        if pred.shape() != real.shape() {
            return Err(Error::Shape(format!("label shapes differ: {:?} vs {:?}", pred.shape(), real.shape())));
        }
        let mut c = Counts::default();
        for (&p, &r) in pred.labels().iter().zip(real.labels()) {
            match (p == class, r == class) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    pub fn pred(&self) -> i64 {
        (self.tp + self.fp) as i64
    }

    pub fn real(&self) -> i64 {
        (self.tp + self.fn_) as i64
    }

    pub fn total(&self) -> i64 {
        (self.tp + self.fp + self.fn_ + self.tn) as i64
    }

    pub fn iou(&self) -> Fraction {
        let union = (self.tp + self.fp + self.fn_) as i64;
        if union == 0 {
            Fraction::new(1, 1)
        } else {
            Fraction::new(self.tp as i64, union)
        }
    }

    pub fn dsc(&self) -> Fraction {
        let den = self.pred() + self.real();
        if den == 0 {
            Fraction::new(1, 1)
        } else {
            Fraction::new(2 * self.tp as i64, den)
        }
    }

    /// Signed `2(|pred| − |real|)/(|pred| + |real|)`.
    pub fn voe(&self) -> Fraction {
        let den = self.pred() + self.real();
        if den == 0 {
            Fraction::new(0, 1)
        } else {
            Fraction::new(2 * (self.pred() - self.real()), den)
        }
    }

    /// `|I − (pred ∪ real)| / |I − real|`; the flag is set when `real` covers every pixel.
    pub fn precision_paper(&self) -> (Fraction, bool) {
        let den = self.total() - self.real();
        if den == 0 {
            (Fraction::new(1, 1), true)
        } else {
            (Fraction::new(self.tn as i64, den), false)
        }
    }

    /// Conventional `tp / (tp + fp)`, 1 when nothing is predicted.
    pub fn precision_std(&self) -> Fraction {
        if self.pred() == 0 {
            Fraction::new(1, 1)
        } else {
            Fraction::new(self.tp as i64, self.pred())
        }
    }

    pub fn recall(&self) -> Fraction {
        if self.real() == 0 {
            Fraction::new(1, 1)
        } else {
            Fraction::new(self.tp as i64, self.real())
        }
    }
}

pub fn iou(pred: &LabelMap, real: &LabelMap, class: u8) -> Result<f64> {
    Ok(Counts::from_labels(pred, real, class)?.iou().value())
}

pub fn dsc(pred: &LabelMap, real: &LabelMap, class: u8) -> Result<f64> {
    Ok(Counts::from_labels(pred, real, class)?.dsc().value())
}

pub fn voe(pred: &LabelMap, real: &LabelMap, class: u8) -> Result<f64> {
    Ok(Counts::from_labels(pred, real, class)?.voe().value())
}

/// Returns the value and whether it fell back to the undefined-case convention.
pub fn precision_paper(pred: &LabelMap, real: &LabelMap, class: u8) -> Result<(f64, bool)> {
    let (f, undefined) = Counts::from_labels(pred, real, class)?.precision_paper();
    Ok((f.value(), undefined))
}

pub fn recall(pred: &LabelMap, real: &LabelMap, class: u8) -> Result<f64> {
    Ok(Counts::from_labels(pred, real, class)?.recall().value())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// Class id, or `None` for the foreground mean.
    pub class: Option<u8>,
    pub iou: f64,
    pub dsc: f64,
    pub voe: f64,
    pub precision: f64,
    pub recall: f64,
    pub precision_std: f64,
    pub precision_undefined: bool,
}

impl ClassMetrics {
    pub fn from_counts(class: u8, c: &Counts) -> Self {
        let (p, undefined) = c.precision_paper();
        ClassMetrics {
            class: Some(class),
            iou: c.iou().value(),
            dsc: c.dsc().value(),
            voe: c.voe().value(),
            precision: p.value(),
            recall: c.recall().value(),
            precision_std: c.precision_std().value(),
            precision_undefined: undefined,
        }
    }

    fn values(&self) -> [f64; 6] {
        [self.iou, self.dsc, self.voe, self.precision, self.recall, self.precision_std]
    }

    fn mean_of(rows: &[ClassMetrics]) -> Self {
        let n = rows.len() as f64;
        let avg = |f: fn(&ClassMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        ClassMetrics {
            class: None,
            iou: avg(|r| r.iou),
            dsc: avg(|r| r.dsc),
            voe: avg(|r| r.voe),
            precision: avg(|r| r.precision),
            recall: avg(|r| r.recall),
            precision_std: avg(|r| r.precision_std),
            precision_undefined: rows.iter().any(|r| r.precision_undefined),
        }
    }
}

pub const METRIC_COLUMNS: [&str; 6] = ["IoU", "DSC", "VOE", "Precision", "Recall", "precision_std"];

/// Foreground per-class metrics plus their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub model: String,
    pub per_class: Vec<ClassMetrics>,
    pub mean: ClassMetrics,
    pub counts: Vec<Counts>,
}

impl MetricsReport {
    /// `counts[k]` holds the pooled counts of class `k`; class 0 is skipped.
    pub fn from_counts(dataset: &str, model: &str, counts: Vec<Counts>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::Config("need at least one foreground class".into()));
        }
        let per_class: Vec<ClassMetrics> = counts
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, c)| ClassMetrics::from_counts(k as u8, c))
            .collect();
        let mean = ClassMetrics::mean_of(&per_class);
        Ok(MetricsReport {
            dataset: dataset.to_string(),
            model: model.to_string(),
            per_class,
            mean,
            counts,
        })
    }

    pub fn class(&self, class: u8) -> Option<&ClassMetrics> {
        self.per_class.iter().find(|c| c.class == Some(class))
    }

    fn rows(&self) -> impl Iterator<Item = (String, &ClassMetrics)> {
        self.per_class
            .iter()
            .map(|r| (class_name(r.class.unwrap_or(0)), r))
            .chain(std::iter::once(("mean".to_string(), &self.mean)))
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("dataset,model,class,{}\n", METRIC_COLUMNS.join(","));
        for (name, r) in self.rows() {
            let vals: Vec<String> = r.values().iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "{},{},{},{}", self.dataset, self.model, name, vals.join(","));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{} on {}\n{:<10}", self.model, self.dataset, "class");
        for c in METRIC_COLUMNS {
            let _ = write!(s, "{c:>14}");
        }
        s.push('\n');
        for (name, r) in self.rows() {
            let _ = write!(s, "{name:<10}");
            for v in r.values() {
                let _ = write!(s, "{v:>14.4}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn class_name(class: u8) -> String {
    match class {
        0 => "background".into(),
        1 => "tumor".into(),
        2 => "vessel".into(),
        k => format!("class{k}"),
    }
}

/// Anything that maps a sample to a label map.
pub trait Segmenter {
    fn segment_sample(&self, sample: &Sample) -> Result<LabelMap>;
}

impl Segmenter for TransFusionNet {
    fn segment_sample(&self, sample: &Sample) -> Result<LabelMap> {
        self.segment(&sample.image, &sample.canny)
    }
}

/// Pooled per-class counts of `model` over `dataset`.
pub fn pooled_counts(model: &dyn Segmenter, dataset: &Dataset, num_classes: usize) -> Result<Vec<Counts>> {
    if dataset.is_empty() {
        return Err(Error::validation("dataset", "cannot evaluate on an empty dataset"));
    }
    let mut counts = vec![Counts::default(); num_classes];
    for s in &dataset.samples {
        let pred = model.segment_sample(s)?;
        for (k, acc) in counts.iter_mut().enumerate() {
            acc.merge(&Counts::from_labels(&pred, &s.labels, k as u8)?);
        }
    }
    Ok(counts)
}

/// Micro-averaged report: counts are pooled over all slices before dividing.
pub fn evaluate(model: &dyn Segmenter, dataset: &Dataset, num_classes: usize, dataset_tag: &str, model_tag: &str) -> Result<MetricsReport> {
    let counts = pooled_counts(model, dataset, num_classes)?;
    MetricsReport::from_counts(dataset_tag, model_tag, counts)
}

/// Per-slice macro average of the foreground metrics, for comparison with [`evaluate`].
pub fn evaluate_macro(model: &dyn Segmenter, dataset: &Dataset, num_classes: usize) -> Result<ClassMetrics> {
    if dataset.is_empty() {
        return Err(Error::validation("dataset", "cannot evaluate on an empty dataset"));
    }
    let mut rows = Vec::new();
    for s in &dataset.samples {
        let pred = model.segment_sample(s)?;
        for k in 1..num_classes {
            rows.push(ClassMetrics::from_counts(k as u8, &Counts::from_labels(&pred, &s.labels, k as u8)?));
        }
    }
    Ok(ClassMetrics::mean_of(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CannyParams, Grid};
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> LabelMap {
        let mut v = vec![0u8; h * w];
        for &(y, x) in on {
            v[y * w + x] = 1;
        }
        LabelMap::new(vec![h, w], 2, v).unwrap()
    }

    #[test]
    fn hand_cases() {
        let p = mask(3, 3, &[(0, 0), (0, 1)]);
        let r = mask(3, 3, &[(0, 1), (0, 2)]);
        assert!((iou(&p, &r, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dsc(&p, &r, 1).unwrap(), 0.5);
        assert_eq!(iou(&p, &p, 1).unwrap(), 1.0);
        assert_eq!(iou(&p, &mask(3, 3, &[(2, 2)]), 1).unwrap(), 0.0);

        let p1 = mask(2, 2, &[(0, 0)]);
        let r3 = mask(2, 2, &[(0, 1), (1, 0), (1, 1)]);
        assert_eq!(voe(&p1, &r3, 1).unwrap(), -1.0);
        assert_eq!(voe(&p, &r, 1).unwrap(), 0.0);

        let p0 = mask(2, 2, &[(0, 0)]);
        let r1 = mask(2, 2, &[(0, 1)]);
        assert_eq!(precision_paper(&p0, &r1, 1).unwrap(), (2.0 / 3.0, false));
        assert_eq!(precision_paper(&mask(2, 2, &[]), &r1, 1).unwrap(), (1.0, false));
        let all = mask(2, 2, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(precision_paper(&all, &r1, 1).unwrap(), (0.0, false));
        assert_eq!(precision_paper(&p0, &all, 1).unwrap(), (1.0, true));

        let pr = mask(3, 3, &[(0, 1)]);
        assert_eq!(recall(&pr, &r, 1).unwrap(), 0.5);
        assert_eq!(recall(&all, &r1, 1).unwrap(), 1.0);
        assert_eq!(recall(&p0, &r1, 1).unwrap(), 0.0);
    }

    #[test]
    fn empty_conventions() {
        let e = mask(4, 4, &[]);
        assert_eq!(iou(&e, &e, 1).unwrap(), 1.0);
        assert_eq!(dsc(&e, &e, 1).unwrap(), 1.0);
        assert_eq!(voe(&e, &e, 1).unwrap(), 0.0);
        assert_eq!(recall(&e, &e, 1).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(iou(&mask(2, 2, &[]), &mask(2, 3, &[]), 1).is_err());
    }

    proptest! {
        #[test]
        fn dsc_iou_identity_and_bounds(p in prop::collection::vec(any::<bool>(), 64), r in prop::collection::vec(any::<bool>(), 64)) {
            let c = Counts::from_masks(&p, &r).unwrap();
            let (i, d) = (c.iou(), c.dsc());
            prop_assert!(d.same_as(Fraction::new(2 * i.num, i.den + i.num)));
            let m = ClassMetrics::from_counts(1, &c);
            for v in [m.iou, m.dsc, m.precision, m.recall] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!((-2.0..=2.0).contains(&m.voe));
            if m.iou > 0.0 {
                prop_assert!(m.dsc >= m.iou);
            }
        }

        #[test]
        fn permutation_invariance(p in prop::collection::vec(any::<bool>(), 36), r in prop::collection::vec(any::<bool>(), 36), shift in 1usize..35) {
            let rot = |v: &[bool]| -> Vec<bool> { (0..v.len()).map(|i| v[(i * 5 + shift) % v.len()]).collect() };
            let a = Counts::from_masks(&p, &r).unwrap();
            let b = Counts::from_masks(&rot(&p), &rot(&r)).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    struct Fixed(Vec<LabelMap>);

    impl Segmenter for Fixed {
        fn segment_sample(&self, s: &Sample) -> Result<LabelMap> {
            Ok(self.0[s.slice_index].clone())
        }
    }

    struct Truth;

    impl Segmenter for Truth {
        fn segment_sample(&self, s: &Sample) -> Result<LabelMap> {
            Ok(s.labels.clone())
        }
    }

    fn dataset(labels: Vec<Vec<u8>>) -> Dataset {
        let samples = labels
            .into_iter()
            .enumerate()
            .map(|(z, l)| {
                let lm = LabelMap::new(vec![4, 4], 3, l).unwrap();
                Sample::new("v", z, Grid::filled(4, 4, 0.5), lm, CannyParams::default()).unwrap()
            })
            .collect();
        Dataset {
            samples,
            split: crate::data::SplitTag::Test,
        }
    }

    #[test]
    fn oracle_model_scores_perfectly() {
        let mut a = vec![0u8; 16];
        a[0] = 1;
        a[5] = 2;
        let mut b = vec![0u8; 16];
        b[3] = 1;
        let ds = dataset(vec![a, b]);
        let rep = evaluate(&Truth, &ds, 3, "toy", "truth").unwrap();
        for r in rep.per_class.iter().chain([&rep.mean]) {
            assert_eq!((r.iou, r.dsc, r.voe, r.precision, r.recall), (1.0, 1.0, 0.0, 1.0, 1.0));
        }
        let csv = rep.to_csv();
        assert!(csv.starts_with("dataset,model,class,IoU,DSC,VOE,Precision,Recall,precision_std\n"));
        assert_eq!(csv.lines().count(), 4);
        assert!(rep.to_table().contains("vessel"));
    }

    #[test]
    fn micro_and_macro_differ_and_micro_pools_counts() {
        // Slice 0: big tumour, perfect. Slice 1: one-pixel tumour, missed.
        let big: Vec<u8> = (0..16).map(|i| u8::from(i < 8)).collect();
        let mut small = vec![0u8; 16];
        small[0] = 1;
        let ds = dataset(vec![big.clone(), small]);
        let pred = Fixed(vec![
            LabelMap::new(vec![4, 4], 3, big).unwrap(),
            LabelMap::new(vec![4, 4], 3, vec![0; 16]).unwrap(),
        ]);
        let micro = evaluate(&pred, &ds, 3, "toy", "m").unwrap();
        let tumour = micro.class(1).unwrap();
        // Pooled: tp 8, fp 0, fn 1.
        assert_eq!(tumour.dsc, 16.0 / 17.0);
        let mac = evaluate_macro(&pred, &ds, 3).unwrap();
        // Tumour slices give 1 and 0; vessel slices are empty and give 1.
        assert_eq!(mac.dsc, (1.0 + 1.0 + 0.0 + 1.0) / 4.0);
        assert_ne!(mac.dsc, micro.mean.dsc);
        assert!(evaluate(&pred, &Dataset { samples: vec![], split: crate::data::SplitTag::Test }, 3, "", "").is_err());
    }
}
