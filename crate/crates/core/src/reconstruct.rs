//! Slice-wise volume inference, 3D Gaussian clean-up, mask fusion and NRRD I/O.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::data::{canny_edges, CannyParams, ImageVolume, LabelMap, TUMOR, VESSEL};
use crate::fusion_decoder::argmax_classes;
use crate::model::TransFusionNet;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Per-slice `K×H×W` logits of `volume`, in slice order.
pub fn predict_volume(net: &TransFusionNet, volume: &ImageVolume, canny: CannyParams) -> Result<Vec<Tensor>> {
    let n = net.cfg.input_size;
    if (volume.height, volume.width) != (n, n) {
        return Err(Error::Shape(format!(
            "volume slices are {}×{} but the model expects {n}×{n}; resample the volume first",
            volume.height, volume.width
        )));
    }
    (0..volume.depth)
        .map(|z| {
            let img = volume.slice(z);
            let edges = canny_edges(&img, canny.low, canny.high)?;
            Ok(net.predict(&img, &edges)?.0)
        })
        .collect()
}

/// Normalized 1D Gaussian taps on `[-r, r]`, `r = ⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable 3D convolution with zero padding; `dims` is `[N, H, W]`.
pub fn gaussian_filter3(data: &[f64], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return data.to_vec();
    }
    let r = (k.len() / 2) as isize;
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        let len = dims[axis] as isize;
        let st = strides[axis];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / st) % dims[axis]) as isize;
            let mut acc = 0.0;
            for (j, &w) in k.iter().enumerate() {
                let q = pos + j as isize - r;
                if (0..len).contains(&q) {
                    acc += w * cur[(i as isize + (q - pos) * st as isize) as usize];
                }
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

/// Smooths a binary mask and keeps voxels whose filtered value is ≥ 0.5.
pub fn smooth_mask(mask: &[bool], dims: [usize; 3], sigma: f64) -> Vec<bool> {
    if sigma <= 0.0 {
        return mask.to_vec();
    }
    let f: Vec<f64> = mask.iter().map(|&b| f64::from(u8::from(b))).collect();
    gaussian_filter3(&f, dims, sigma).into_iter().map(|v| v >= 0.5).collect()
}

/// Label 2 where `vessel`, else 1 where `tumor`, else 0.
pub fn fuse_masks(tumor: &[bool], vessel: &[bool], dims: [usize; 3]) -> Result<LabelMap> {
    let n: usize = dims.iter().product();
    if tumor.len() != n || vessel.len() != n {
        return Err(Error::Shape(format!(
            "masks of {} and {} voxels for a {dims:?} volume",
            tumor.len(),
            vessel.len()
        )));
    }
    let labels = tumor
        .iter()
        .zip(vessel)
        .map(|(&t, &v)| if v { VESSEL } else if t { TUMOR } else { 0 })
        .collect();
    LabelMap::new(dims.to_vec(), 3, labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionResult {
    /// `N×H×W` labels.
    pub fused_labels: LabelMap,
    /// Smoothed binary masks of classes `1..K`, index `k − 1`.
    pub per_class_masks: Vec<Vec<bool>>,
    pub sigma: f64,
    /// Digests of the models that produced the logits.
    pub provenance: Vec<String>,
}

fn stack_argmax(logits: &[Tensor]) -> Result<(Vec<u8>, [usize; 3], usize)> {
    let first = logits.first().ok_or_else(|| Error::validation("logits", "no slices"))?;
    let (k, h, w) = first.dims3();
    let mut labels = Vec::with_capacity(logits.len() * h * w);
    for t in logits {
        if t.shape() != first.shape() {
            return Err(Error::Shape(format!("slice logits {:?} vs {:?}", t.shape(), first.shape())));
        }
        labels.extend(argmax_classes(t));
    }
    Ok((labels, [logits.len(), h, w], k))
}

/// Argmax per voxel, per-class smoothing, then fusion with vessel precedence.
pub fn reconstruct(logits: &[Tensor], sigma: f64) -> Result<ReconstructionResult> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::validation("sigma", format!("must be ≥ 0, got {sigma}")));
    }
    let (labels, dims, k) = stack_argmax(logits)?;
    let masks: Vec<Vec<bool>> = (1..k as u8)
        .map(|c| {
            let m: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            smooth_mask(&m, dims, sigma)
        })
        .collect();
    let none = vec![false; labels.len()];
    let tumor = masks.get(TUMOR as usize - 1).unwrap_or(&none);
    let vessel = masks.get(VESSEL as usize - 1).unwrap_or(&none);
    let fused_labels = fuse_masks(tumor, vessel, dims)?;
    Ok(ReconstructionResult {
        fused_labels,
        per_class_masks: masks,
        sigma,
        provenance: Vec::new(),
    })
}

/// Two-model workflow: the tumour mask comes from `tumor_logits` and the
/// vessel mask from `vessel_logits`.
pub fn reconstruct_pair(tumor_logits: &[Tensor], vessel_logits: &[Tensor], sigma: f64) -> Result<ReconstructionResult> {
    let t = reconstruct(tumor_logits, sigma)?;
    let v = reconstruct(vessel_logits, sigma)?;
    if t.fused_labels.shape() != v.fused_labels.shape() {
        return Err(Error::Shape("tumour and vessel predictions cover different volumes".into()));
    }
    let dims: [usize; 3] = t.fused_labels.shape().try_into().expect("3D");
    let tumor = t.per_class_masks[TUMOR as usize - 1].clone();
    let vessel = v.per_class_masks[VESSEL as usize - 1].clone();
    let fused_labels = fuse_masks(&tumor, &vessel, dims)?;
    Ok(ReconstructionResult {
        fused_labels,
        per_class_masks: vec![tumor, vessel],
        sigma,
        provenance: Vec::new(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NrrdEncoding {
    #[default]
    Raw,
    Gzip,
}

/// Writes a 3D `uint8` label volume; `spacing` is `(dz, dy, dx)`.
pub fn export_nrrd(labels: &LabelMap, spacing: [f64; 3], path: &Path, encoding: NrrdEncoding) -> Result<()> {
    let dims = labels.shape();
    if dims.len() != 3 {
        return Err(Error::Shape(format!("NRRD export needs a 3D label map, got {dims:?}")));
    }
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let enc = match encoding {
        NrrdEncoding::Raw => "raw",
        NrrdEncoding::Gzip => "gzip",
    };
    let mut out = format!(
        "NRRD0004\ntype: unsigned char\ndimension: 3\nspace: left-posterior-superior\nsizes: {w} {h} {n}\n\
         space directions: ({},0,0) (0,{},0) (0,0,{})\nkinds: domain domain domain\nendian: little\n\
         encoding: {enc}\nspace origin: (0,0,0)\n\n",
        spacing[2], spacing[1], spacing[0]
    )
    .into_bytes();
    match encoding {
        NrrdEncoding::Raw => out.extend_from_slice(labels.labels()),
        NrrdEncoding::Gzip => {
            let mut gz = GzEncoder::new(Vec::new(), Compression::default());
            gz.write_all(labels.labels()).map_err(|e| Error::io(path, e))?;
            out.extend(gz.finish().map_err(|e| Error::io(path, e))?);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NrrdVolume {
    pub labels: LabelMap,
    /// `(dz, dy, dx)`.
    pub spacing: [f64; 3],
    /// Header fields in file order.
    pub header: Vec<(String, String)>,
}

fn parse_vector(s: &str) -> Result<Vec<f64>> {
    s.trim()
        .trim_start_matches('(')
        .trim_end_matches(')')
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Format(format!("bad vector {s:?}: {e}"))))
        .collect()
}

/// Reads a file written by [`export_nrrd`]; `classes` bounds the label values.
pub fn import_nrrd(path: &Path, classes: u8) -> Result<NrrdVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Format("NRRD header is not terminated by a blank line".into()))?;
    let text = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::Format("NRRD header is not UTF-8".into()))?;
    let mut lines = text.lines();
    if !lines.next().is_some_and(|l| l.starts_with("NRRD000")) {
        return Err(Error::Format("missing NRRD magic".into()));
    }
    let header: Vec<(String, String)> = lines
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_once(": ").map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let field = |k: &str| {
        header
            .iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("NRRD header lacks {k:?}")))
    };
    if !matches!(field("type")?, "unsigned char" | "uchar" | "uint8") || field("dimension")? != "3" {
        return Err(Error::Format("only 3D unsigned char volumes are supported".into()));
    }
    let sizes: Vec<usize> = field("sizes")?
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| Error::Format(format!("bad size {v:?}"))))
        .collect::<Result<_>>()?;
    if sizes.len() != 3 {
        return Err(Error::Format("sizes must have three entries".into()));
    }
    let dirs = field("space directions")?;
    let vecs: Vec<Vec<f64>> = dirs.split(") (").map(parse_vector).collect::<Result<_>>()?;
    if vecs.len() != 3 || vecs.iter().any(|v| v.len() != 3) {
        return Err(Error::Format(format!("bad space directions {dirs:?}")));
    }
    let spacing = [vecs[2][2], vecs[1][1], vecs[0][0]];
    let body = &bytes[split + 2..];
    let data = match field("encoding")? {
        "raw" => body.to_vec(),
        "gzip" | "gz" => {
            let mut v = Vec::new();
            GzDecoder::new(body).read_to_end(&mut v).map_err(|e| Error::io(path, e))?;
            v
        }
        e => return Err(Error::Format(format!("unsupported encoding {e:?}"))),
    };
    let (w, h, n) = (sizes[0], sizes[1], sizes[2]);
    if data.len() != w * h * n {
        return Err(Error::Format(format!("payload has {} bytes, expected {}", data.len(), w * h * n)));
    }
    Ok(NrrdVolume {
        labels: LabelMap::new(vec![n, h, w], classes, data)?,
        spacing,
        header,
    })
}
