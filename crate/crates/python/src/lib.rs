//! Python bindings: phantom volumes, models, training, metrics, reconstruction
//! and int8 quantization.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use transfusion::checkpoint::Checkpoint;
use transfusion::data::{
    canny_edges, generate_phantom, load_volume_dir, save_volume_dir, CannyParams, Dataset, Grid, ImageVolume, LabelMap,
    PhantomSpec,
};
use transfusion::deploy::{quantize_checkpoint, FakeQuantModel, QuantizedModel};
use transfusion::fusion_decoder::argmax_classes;
use transfusion::metrics::{evaluate, Counts, MetricsReport, Segmenter};
use transfusion::model::{ModelConfig, TransFusionNet};
use transfusion::reconstruct::{export_nrrd as write_nrrd, predict_volume, reconstruct, NrrdEncoding};
use transfusion::train::{train as train_model, TrainConfig};
use transfusion::Tensor;

fn py_err(e: transfusion::Error) -> PyErr {
    use transfusion::Error as E;
    match e {
        E::Validation { .. } | E::Shape(_) | E::Config(_) | E::Incompatible { .. } => PyValueError::new_err(e.to_string()),
        E::Io { .. } => PyOSError::new_err(e.to_string()),
        E::Diverged { .. } | E::Format(_) => PyRuntimeError::new_err(e.to_string()),
    }
}

fn image(pixels: Vec<f64>, height: usize, width: usize) -> PyResult<Grid<f64>> {
    if pixels.len() != height * width {
        return Err(PyValueError::new_err(format!("{} pixels for a {height}×{width} image", pixels.len())));
    }
    Ok(Grid::new(height, width, pixels))
}

fn canny(img: &Grid<f64>) -> PyResult<transfusion::data::EdgeMap> {
    let p = CannyParams::default();
    canny_edges(img, p.low, p.high).map_err(py_err)
}

fn dataset(volumes: &[PyRef<'_, Volume>]) -> PyResult<Dataset> {
    let pairs = volumes
        .iter()
        .map(|v| {
            let l = v.labels.clone().ok_or_else(|| PyValueError::new_err(format!("volume {} has no labels", v.volume.id)))?;
            Ok((v.volume.clone(), l))
        })
        .collect::<PyResult<Vec<_>>>()?;
    Dataset::from_volumes(&pairs, CannyParams::default()).map_err(py_err)
}

fn report_dict(r: &MetricsReport) -> HashMap<String, f64> {
    let mut d = HashMap::new();
    for c in r.per_class.iter().chain(std::iter::once(&r.mean)) {
        let name = c.class.map_or("mean".to_string(), transfusion::metrics::class_name);
        d.insert(format!("{name}_iou"), c.iou);
        d.insert(format!("{name}_dsc"), c.dsc);
        d.insert(format!("{name}_voe"), c.voe);
        d.insert(format!("{name}_precision"), c.precision);
        d.insert(format!("{name}_recall"), c.recall);
    }
    d
}

/// A CT-like volume, optionally with ground-truth labels.
#[pyclass(module = "transfusion", frozen)]
pub struct Volume {
    volume: ImageVolume,
    labels: Option<LabelMap>,
}

#[pymethods]
impl Volume {
    /// Synthetic labelled phantom.
    #[staticmethod]
    #[pyo3(signature = (seed=0, n_slices=8, size=64))]
    fn phantom(seed: u64, n_slices: usize, size: usize) -> PyResult<Self> {
        let spec = PhantomSpec {
            seed,
            n_slices,
            height: size,
            width: size,
            ..PhantomSpec::default()
        };
        let (volume, labels) = generate_phantom(&spec).map_err(py_err)?;
        Ok(Volume {
            volume,
            labels: Some(labels),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (volume, labels, _) = load_volume_dir(&path).map_err(py_err)?;
        Ok(Volume { volume, labels })
    }

    /// Writes `<root>/<id>/` and returns that directory.
    fn save(&self, root: PathBuf) -> PyResult<PathBuf> {
        save_volume_dir(&root, &self.volume, self.labels.as_ref(), None, None).map_err(py_err)
    }

    #[getter]
    fn id(&self) -> String {
        self.volume.id.clone()
    }

    /// `(depth, height, width)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.volume.depth, self.volume.height, self.volume.width)
    }

    /// `(dz, dy, dx)` in millimetres.
    #[getter]
    fn spacing(&self) -> (f64, f64, f64) {
        let [z, y, x] = self.volume.spacing;
        (z, y, x)
    }

    fn voxels(&self) -> Vec<f64> {
        self.volume.voxels.clone()
    }

    fn labels(&self) -> Option<Vec<u8>> {
        self.labels.as_ref().map(|l| l.labels().to_vec())
    }

    fn slice(&self, z: usize) -> PyResult<Vec<f64>> {
        if z >= self.volume.depth {
            return Err(PyValueError::new_err(format!("slice {z} of {}", self.volume.depth)));
        }
        Ok(self.volume.slice(z).data)
    }

    fn __repr__(&self) -> String {
        let (d, h, w) = self.shape();
        format!("Volume(id={:?}, shape=({d}, {h}, {w}), labelled={})", self.volume.id, self.labels.is_some())
    }
}

/// Float network.
#[pyclass(module = "transfusion", frozen)]
pub struct Model {
    net: TransFusionNet,
    train: TrainConfig,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (base_width=8, input_size=64, seed=0))]
    fn new(base_width: usize, input_size: usize, seed: u64) -> PyResult<Self> {
        let mut cfg = ModelConfig::with_base_width(base_width);
        cfg.input_size = input_size;
        Ok(Model {
            net: TransFusionNet::new(&cfg, seed).map_err(py_err)?,
            train: TrainConfig::default(),
        })
    }

    /// Reads a checkpoint directory or archive.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(Model {
            net: ck.build().map_err(py_err)?,
            train: ck.train,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<PathBuf> {
        self.checkpoint().save(&dir).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.net.store.scalar_count()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.net.cfg.input_size
    }

    /// Flat `K×H×W` logits and their shape.
    fn predict(&self, pixels: Vec<f64>, height: usize, width: usize) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let img = image(pixels, height, width)?;
        let (logits, _) = self.net.predict(&img, &canny(&img)?).map_err(py_err)?;
        Ok((logits.data().to_vec(), logits.shape().to_vec()))
    }

    /// Flat edge probabilities, or `None` without an edge stream.
    fn predict_edges(&self, pixels: Vec<f64>, height: usize, width: usize) -> PyResult<Option<Vec<f64>>> {
        let img = image(pixels, height, width)?;
        let (_, edge) = self.net.predict(&img, &canny(&img)?).map_err(py_err)?;
        Ok(edge.map(|e| e.data().to_vec()))
    }

    fn segment(&self, pixels: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<u8>> {
        let img = image(pixels, height, width)?;
        let labels = self.net.segment(&img, &canny(&img)?).map_err(py_err)?;
        Ok(labels.labels().to_vec())
    }

    /// Slice-wise argmax labels of a whole volume, flat `N×H×W`.
    fn segment_volume(&self, volume: &Volume) -> PyResult<Vec<u8>> {
        let logits = predict_volume(&self.net, &volume.volume, CannyParams::default()).map_err(py_err)?;
        Ok(logits.iter().flat_map(argmax_classes).collect())
    }

    /// Smoothed and fused labels, flat `N×H×W`.
    #[pyo3(signature = (volume, sigma=1.0))]
    fn reconstruct(&self, volume: &Volume, sigma: f64) -> PyResult<Vec<u8>> {
        let logits = predict_volume(&self.net, &volume.volume, CannyParams::default()).map_err(py_err)?;
        let r = reconstruct(&logits, sigma).map_err(py_err)?;
        Ok(r.fused_labels.labels().to_vec())
    }

    /// Pooled per-class and mean metrics, keyed like `vessel_dsc`.
    fn evaluate(&self, volumes: Vec<PyRef<'_, Volume>>) -> PyResult<HashMap<String, f64>> {
        let ds = dataset(&volumes)?;
        let r = evaluate(&self.net, &ds, self.net.cfg.num_classes, "python", "model").map_err(py_err)?;
        Ok(report_dict(&r))
    }

    /// Int8 weights with activation ranges calibrated on `calibration`.
    fn quantize(&self, calibration: Vec<PyRef<'_, Volume>>) -> PyResult<Quantized> {
        let ds = dataset(&calibration)?;
        let model = quantize_checkpoint(&self.checkpoint(), &ds).map_err(py_err)?;
        let fake = model.fake_quant().map_err(py_err)?;
        Ok(Quantized { model, fake })
    }

    fn __repr__(&self) -> String {
        format!("Model(input_size={}, params={})", self.net.cfg.input_size, self.param_count())
    }
}

impl Model {
    fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.net, &self.train, self.train.epochs, String::new(), None)
    }
}

/// Fake-quantized network.
#[pyclass(module = "transfusion", frozen)]
pub struct Quantized {
    model: QuantizedModel,
    fake: FakeQuantModel,
}

#[pymethods]
impl Quantized {
    fn segment(&self, pixels: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<u8>> {
        let img = image(pixels, height, width)?;
        let logits: Tensor = self.fake.predict_image(&img, &canny(&img)?).map_err(py_err)?;
        Ok(argmax_classes(&logits))
    }

    fn evaluate(&self, volumes: Vec<PyRef<'_, Volume>>) -> PyResult<HashMap<String, f64>> {
        let ds = dataset(&volumes)?;
        let r = evaluate(&self.fake as &dyn Segmenter, &ds, self.model.model.num_classes, "python", "int8").map_err(py_err)?;
        Ok(report_dict(&r))
    }

    /// Writes the int8 archive to `path`.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let bytes = self.model.to_bytes().map_err(py_err)?;
        std::fs::write(&path, bytes).map_err(|e| PyOSError::new_err(format!("{}: {e}", path.display())))
    }

    #[getter]
    fn quantized_tensors(&self) -> usize {
        self.model.quantized.len()
    }
}

/// Trains a fresh model and returns it with the per-epoch total losses.
#[pyfunction]
#[pyo3(signature = (volumes, epochs=10, lr=0.05, batch_size=8, seed=0, base_width=8))]
fn train(
    volumes: Vec<PyRef<'_, Volume>>,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    base_width: usize,
) -> PyResult<(Model, Vec<f64>)> {
    let ds = dataset(&volumes)?;
    let mut cfg = ModelConfig::with_base_width(base_width);
    cfg.input_size = ds.samples.first().map_or(cfg.input_size, |s| s.image.height);
    let tc = TrainConfig {
        epochs,
        lr0: lr,
        batch_size,
        seed,
        ..TrainConfig::default()
    };
    let (ck, log) = train_model(&cfg, &tc, &ds).map_err(py_err)?;
    let losses = log.epochs.iter().map(|e| e.report.total).collect();
    Ok((
        Model {
            net: ck.build().map_err(py_err)?,
            train: tc,
        },
        losses,
    ))
}

/// IoU, DSC, VOE, precision and recall of one class over flat label arrays.
#[pyfunction]
#[pyo3(signature = (pred, real, class_id=1))]
fn metrics(pred: Vec<u8>, real: Vec<u8>, class_id: u8) -> PyResult<HashMap<String, f64>> {
    let p: Vec<bool> = pred.iter().map(|&l| l == class_id).collect();
    let r: Vec<bool> = real.iter().map(|&l| l == class_id).collect();
    let c = Counts::from_masks(&p, &r).map_err(py_err)?;
    Ok(HashMap::from([
        ("iou".to_string(), c.iou().value()),
        ("dsc".to_string(), c.dsc().value()),
        ("voe".to_string(), c.voe().value()),
        ("precision".to_string(), c.precision_paper().0.value()),
        ("recall".to_string(), c.recall().value()),
    ]))
}

/// Writes flat `N×H×W` labels as a uint8 NRRD volume.
#[pyfunction]
#[pyo3(signature = (labels, shape, spacing, path, gzip=false))]
fn export_nrrd(labels: Vec<u8>, shape: (usize, usize, usize), spacing: (f64, f64, f64), path: PathBuf, gzip: bool) -> PyResult<()> {
    let classes = labels.iter().copied().max().map_or(1, |m| m + 1).max(3);
    let map = LabelMap::new(vec![shape.0, shape.1, shape.2], classes, labels).map_err(py_err)?;
    let enc = if gzip { NrrdEncoding::Gzip } else { NrrdEncoding::Raw };
    write_nrrd(&map, [spacing.0, spacing.1, spacing.2], &path, enc).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "transfusion")]
fn transfusion_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Volume>()?;
    m.add_class::<Model>()?;
    m.add_class::<Quantized>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(export_nrrd, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
