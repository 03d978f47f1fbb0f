use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use transfusion::checkpoint::{archive_path, read_archive, Checkpoint, ARCHIVE_NAME};
use transfusion::data::{
    canny_edges, generate_phantom, load_dataset_dir, load_volume_dir, save_edge_png, save_label_png,
    save_volume_dir, split_dataset, Dataset, EdgeKind, EdgeMap, Grid, ImageVolume, LabelMap, PhantomSpec,
};
use transfusion::deploy::{compare_models, distill as distill_model, quantize_checkpoint, quantized_digest, QuantizedModel};
use transfusion::fusion_decoder::argmax_classes;
use transfusion::metrics::{evaluate as evaluate_model, Segmenter};
use transfusion::model::{ModelConfig, TransFusionNet};
use transfusion::reconstruct::{export_nrrd, predict_volume, reconstruct as reconstruct_logits, reconstruct_pair, NrrdEncoding};
use transfusion::rng::derive_seed;
use transfusion::train::{finetune as finetune_model, run_ablation, train as train_model, TrainConfig, TrainLog, Variant};

use crate::config::{is_set, Overrides, RunConfig};
use crate::error::CliError;
use crate::manifest::RunManifest;

pub const DEFAULT_STUDENT_WIDTH: usize = 4;

pub struct Ctx {
    pub cfg: RunConfig,
    pub overrides: Overrides,
}

impl Ctx {
    fn manifest(&self, command: &str) -> RunManifest {
        let config = serde_json::to_value(&self.cfg).expect("config serializes");
        RunManifest::start(command, self.cfg.train.seed, config)
    }

    /// Model config sized to `ds` unless the input size was set explicitly.
    fn model_for(&self, ds: &Dataset) -> ModelConfig {
        let mut m = self.cfg.model.clone();
        if !is_set(&self.overrides, "model.input_size") {
            if let Some(s) = ds.samples.first() {
                m.input_size = s.image.height;
            }
        }
        m
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::runtime(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn load_volumes(path: &Path) -> Result<Vec<(ImageVolume, LabelMap)>, CliError> {
    if !path.exists() {
        return Err(CliError::validation(format!("{} does not exist", path.display())));
    }
    if path.join("meta.json").is_file() {
        let (v, l, _) = load_volume_dir(path)?;
        let l = l.ok_or_else(|| CliError::validation(format!("{} has no label slices", path.display())))?;
        return Ok(vec![(v, l)]);
    }
    Ok(load_dataset_dir(path)?)
}

fn load_dataset(ctx: &Ctx, path: &Path) -> Result<Dataset, CliError> {
    Ok(Dataset::from_volumes(&load_volumes(path)?, ctx.cfg.canny)?)
}

/// A float checkpoint or a quantized archive.
pub enum Loaded {
    Float(Checkpoint),
    Quantized(QuantizedModel),
}

impl Loaded {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let file = archive_path(path);
        let bytes = fs::read(&file).map_err(|e| CliError::validation(format!("{}: {e}", file.display())))?;
        let (head, _): (Value, _) = read_archive(&bytes)?;
        match head.get("kind").and_then(Value::as_str) {
            Some("checkpoint") => Ok(Loaded::Float(Checkpoint::from_bytes(&bytes)?)),
            Some("quantized") => Ok(Loaded::Quantized(QuantizedModel::from_bytes(&bytes)?)),
            other => Err(CliError::validation(format!("{}: unknown archive kind {other:?}", file.display()))),
        }
    }

    pub fn model(&self) -> &ModelConfig {
        match self {
            Loaded::Float(c) => &c.model,
            Loaded::Quantized(q) => &q.model,
        }
    }

    pub fn digest(&self) -> Result<String, CliError> {
        Ok(match self {
            Loaded::Float(c) => c.digest()?,
            Loaded::Quantized(q) => quantized_digest(q)?,
        })
    }

    pub fn segmenter(&self) -> Result<Box<dyn Segmenter>, CliError> {
        Ok(match self {
            Loaded::Float(c) => Box::new(c.build()?),
            Loaded::Quantized(q) => Box::new(q.fake_quant()?),
        })
    }

    fn float(self, path: &Path) -> Result<Checkpoint, CliError> {
        match self {
            Loaded::Float(c) => Ok(c),
            Loaded::Quantized(_) => Err(CliError::validation(format!("{} is quantized; a float checkpoint is needed", path.display()))),
        }
    }
}

fn load_float(path: &Path) -> Result<Checkpoint, CliError> {
    Loaded::read(path)?.float(path)
}

fn tag(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

fn save_training(out: &Path, ck: &Checkpoint, log: &TrainLog, m: &mut RunManifest) -> Result<(), CliError> {
    let archive = ck.save(out)?;
    let log_path = out.join("train_log.csv");
    write_text(&log_path, &log.to_csv())?;
    m.output("checkpoint", &archive);
    m.output("train_log", &log_path);
    m.note("checkpoint_digest", ck.digest()?);
    if let Some(last) = log.epochs.last() {
        m.note("final_loss", last.report);
        eprintln!(
            "epoch {}: seg {:.4} edge {:.4} sreg {:.4} total {:.4}",
            last.report.epoch, last.report.seg, last.report.edge, last.report.sreg, last.report.total
        );
    }
    Ok(())
}

pub fn gen_data(ctx: &Ctx, out: &Path) -> Result<(), CliError> {
    let mut m = ctx.manifest("gen-data");
    m.seed = ctx.cfg.phantom.seed;
    create_dir(out)?;
    for i in 0..ctx.cfg.data.volumes {
        let spec = PhantomSpec {
            seed: derive_seed(ctx.cfg.phantom.seed, "data", i as u64),
            ..ctx.cfg.phantom.clone()
        };
        let (mut vol, labels) = generate_phantom(&spec)?;
        vol.id = format!("phantom_{i:03}");
        let dir = save_volume_dir(out, &vol, Some(&labels), Some(spec.seed), Some(&spec))?;
        m.output(&vol.id, &dir);
    }
    eprintln!("wrote {} volumes to {}", ctx.cfg.data.volumes, out.display());
    m.finish(out)?;
    Ok(())
}

fn train_config(ctx: &Ctx, variant: Option<&str>) -> Result<TrainConfig, CliError> {
    let mut tc = ctx.cfg.train.clone();
    if let Some(v) = variant {
        tc.ablation = v.parse::<Variant>()?.flags();
    }
    Ok(tc)
}

pub fn train(ctx: &Ctx, data: &Path, out: &Path, variant: Option<&str>) -> Result<(), CliError> {
    let mut m = ctx.manifest("train");
    m.input("data", data);
    let ds = load_dataset(ctx, data)?;
    let tc = train_config(ctx, variant)?;
    let (ck, log) = train_model(&ctx.model_for(&ds), &tc, &ds)?;
    save_training(out, &ck, &log, &mut m)?;
    m.finish(out)?;
    Ok(())
}

pub fn finetune(ctx: &Ctx, ckpt: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let mut m = ctx.manifest("finetune");
    m.input("checkpoint", ckpt);
    m.input("data", data);
    let base = load_float(ckpt)?;
    let ds = load_dataset(ctx, data)?;
    let model = base.model.clone();
    let (ck, log) = finetune_model(&base, &model, &ctx.cfg.train, &ds)?;
    m.note("base_digest", base.digest()?);
    save_training(out, &ck, &log, &mut m)?;
    m.finish(out)?;
    Ok(())
}

pub fn evaluate(ctx: &Ctx, ckpt: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let mut m = ctx.manifest("evaluate");
    m.input("checkpoint", ckpt);
    m.input("data", data);
    let model = Loaded::read(ckpt)?;
    let ds = load_dataset(ctx, data)?;
    let seg = model.segmenter()?;
    let report = evaluate_model(seg.as_ref(), &ds, model.model().num_classes, &tag(data), &tag(ckpt))?;
    create_dir(out)?;
    let csv = out.join("metrics.csv");
    write_text(&csv, &report.to_csv())?;
    m.output("metrics", &csv);
    m.note("mean_dsc", report.mean.dsc);
    print!("{}", report.to_csv());
    eprint!("{}", report.to_table());
    m.finish(out)?;
    Ok(())
}

pub fn ablate(ctx: &Ctx, data: &Path, test_data: Option<&Path>, out: &Path, variants: &[String], seeds: u64) -> Result<(), CliError> {
    let mut m = ctx.manifest("ablate");
    m.input("data", data);
    let variants: Vec<Variant> = if variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        variants.iter().map(|v| v.parse()).collect::<Result<_, _>>()?
    };
    if seeds == 0 {
        return Err(CliError::validation("--seeds must be at least 1"));
    }
    let all = load_dataset(ctx, data)?;
    let (train_set, test_set) = match test_data {
        Some(t) => {
            m.input("test_data", t);
            (all, load_dataset(ctx, t)?)
        }
        None => split_dataset(&all, ctx.cfg.data.split_ratio, ctx.cfg.train.seed)?,
    };
    let model = ctx.model_for(&train_set);
    let mut csv = String::new();
    let mut summary = Vec::new();
    for v in &variants {
        let mut mean = 0.0;
        for s in 0..seeds {
            let tc = TrainConfig {
                seed: ctx.cfg.train.seed + s,
                ..ctx.cfg.train.clone()
            };
            let mut r = run_ablation(*v, &model, &tc, &train_set, &test_set)?;
            r.model = format!("{}/seed{}", v.name(), tc.seed);
            mean += r.mean.dsc / seeds as f64;
            let text = r.to_csv();
            let body = if csv.is_empty() { &text[..] } else { text.split_once('\n').map_or("", |x| x.1) };
            csv.push_str(body);
            eprintln!("{} seed {}: mean DSC {:.4}", v.name(), tc.seed, r.mean.dsc);
        }
        println!("{:<18} mean DSC {:.4}", v.name(), mean);
        summary.push((v.name(), mean));
    }
    create_dir(out)?;
    let path = out.join("ablation.csv");
    write_text(&path, &csv)?;
    m.output("ablation", &path);
    m.note("mean_dsc", summary);
    m.finish(out)?;
    Ok(())
}

pub fn segment(ctx: &Ctx, ckpt: &Path, volume: &Path, out: &Path) -> Result<(), CliError> {
    let mut m = ctx.manifest("segment");
    m.input("checkpoint", ckpt);
    m.input("volume", volume);
    let net = load_float(ckpt)?.build()?;
    let (vol, _, _) = load_volume_dir(volume)?;
    create_dir(out)?;
    let k = net.cfg.num_classes as u8;
    for z in 0..vol.depth {
        let img = vol.slice(z);
        let canny = canny_edges(&img, ctx.cfg.canny.low, ctx.cfg.canny.high)?;
        let (logits, edge) = net.predict(&img, &canny)?;
        let labels = LabelMap::new(vec![vol.height, vol.width], k, argmax_classes(&logits))?;
        save_label_png(&out.join(format!("seg_{z:04}.png")), &labels)?;
        save_edge_png(&out.join(format!("canny_{z:04}.png")), &canny)?;
        if let Some(e) = edge {
            let map = EdgeMap::new(EdgeKind::EdgePrediction, Grid::new(vol.height, vol.width, e.data().to_vec()))?;
            save_edge_png(&out.join(format!("edge_{z:04}.png")), &map)?;
        }
    }
    m.output("slices", out);
    m.note("slices", vol.depth);
    eprintln!("segmented {} slices into {}", vol.depth, out.display());
    m.finish(out)?;
    Ok(())
}

pub enum Models {
    Single(PathBuf),
    Pair(PathBuf, PathBuf),
}

pub fn reconstruct(ctx: &Ctx, volume: &Path, models: Models, out: &Path) -> Result<(), CliError> {
    let mut m = ctx.manifest("reconstruct");
    m.input("volume", volume);
    let (vol, _, _) = load_volume_dir(volume)?;
    let sigma = ctx.cfg.reconstruct.sigma;
    let logits_of = |p: &Path| -> Result<(Vec<transfusion::Tensor>, String), CliError> {
        let ck = load_float(p)?;
        let net: TransFusionNet = ck.build()?;
        Ok((predict_volume(&net, &vol, ctx.cfg.canny)?, ck.digest()?))
    };
    let mut result = match &models {
        Models::Single(c) => {
            m.input("checkpoint", c);
            let (l, d) = logits_of(c)?;
            let mut r = reconstruct_logits(&l, sigma)?;
            r.provenance = vec![d];
            r
        }
        Models::Pair(t, v) => {
            m.input("tumor_checkpoint", t);
            m.input("vessel_checkpoint", v);
            let (lt, dt) = logits_of(t)?;
            let (lv, dv) = logits_of(v)?;
            let mut r = reconstruct_pair(&lt, &lv, sigma)?;
            r.provenance = vec![dt, dv];
            r
        }
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let enc = if ctx.cfg.reconstruct.gzip { NrrdEncoding::Gzip } else { NrrdEncoding::Raw };
    export_nrrd(&result.fused_labels, vol.spacing, out, enc)?;
    m.output("nrrd", out);
    m.note("provenance", std::mem::take(&mut result.provenance));
    m.note("histogram", result.fused_labels.histogram());
    eprintln!("wrote {}", out.display());
    m.finish(out)?;
    Ok(())
}

pub fn quantize(ctx: &Ctx, ckpt: &Path, data: &Path, out: &Path, test_data: Option<&Path>) -> Result<(), CliError> {
    let mut m = ctx.manifest("quantize");
    m.input("checkpoint", ckpt);
    m.input("calibration", data);
    let ck = load_float(ckpt)?;
    let calib = load_dataset(ctx, data)?;
    let q = quantize_checkpoint(&ck, &calib)?;
    create_dir(out)?;
    let path = out.join(ARCHIVE_NAME);
    fs::write(&path, q.to_bytes()?).map_err(|e| io_err(&path, e))?;
    m.output("quantized", &path);
    m.note("digest", quantized_digest(&q)?);
    m.note("source_digest", &q.source_digest);
    if let Some(t) = test_data {
        m.input("test_data", t);
        let ds = load_dataset(ctx, t)?;
        let c = compare_models(&ck.build()?, "f32", &q.fake_quant()?, "int8", &ds, ck.model.num_classes)?;
        let csv = out.join("comparison.csv");
        write_text(&csv, &c.to_csv())?;
        m.output("comparison", &csv);
        m.note("mean_dsc_delta", c.mean_delta().dsc);
        print!("{}", c.to_table());
    }
    eprintln!("wrote {}", path.display());
    m.finish(out)?;
    Ok(())
}

pub fn distill(ctx: &Ctx, teacher: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let mut m = ctx.manifest("distill");
    m.input("teacher", teacher);
    m.input("data", data);
    let t = load_float(teacher)?;
    let ds = load_dataset(ctx, data)?;
    let student = ctx.model_for(&ds);
    let outcome = distill_model(&t, &student, &ctx.cfg.train, &ctx.cfg.distill, &ds)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    m.note("warnings", &outcome.warnings);
    m.note("teacher_digest", t.digest()?);
    save_training(out, &outcome.checkpoint, &outcome.log, &mut m)?;
    m.finish(out)?;
    Ok(())
}

pub fn compare(ctx: &Ctx, a: &Path, b: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let mut m = ctx.manifest("compare");
    m.input("a", a);
    m.input("b", b);
    m.input("data", data);
    let (la, lb) = (Loaded::read(a)?, Loaded::read(b)?);
    if la.model().num_classes != lb.model().num_classes {
        return Err(CliError::validation("models predict different class counts"));
    }
    let ds = load_dataset(ctx, data)?;
    let (sa, sb) = (la.segmenter()?, lb.segmenter()?);
    let c = compare_models(sa.as_ref(), &tag(a), sb.as_ref(), &tag(b), &ds, la.model().num_classes)?;
    create_dir(out)?;
    let csv = out.join("comparison.csv");
    write_text(&csv, &c.to_csv())?;
    m.output("comparison", &csv);
    m.note("digest_a", la.digest()?);
    m.note("digest_b", lb.digest()?);
    m.note("mean_dsc_delta", c.mean_delta().dsc);
    print!("{}", c.to_table());
    m.finish(out)?;
    Ok(())
}
