//! Volumes, label maps and edge maps; synthetic phantoms; Canny and edge
//! labels; slice datasets with deterministic splits and on-disk storage.

mod canny;
mod io;
mod phantom;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use canny::{canny_edges, CannyParams};
pub use io::{load_dataset_dir, load_volume_dir, save_edge_png, save_label_png, save_volume_dir, VolumeMeta};
pub use phantom::{generate_phantom, rasterize_vessel, PhantomSpec, VesselPath};

pub const NUM_CLASSES: u8 = 3;
pub const BACKGROUND: u8 = 0;
pub const TUMOR: u8 = 1;
pub const VESSEL: u8 = 2;

/// Row-major 2D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(height * width, data.len(), "grid data length mismatch");
        Grid { height, width, data }
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Grid {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    /// Neighbour access with coordinates clamped into the grid.
    #[inline]
    pub fn clamped(&self, y: isize, x: isize) -> T {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(y, x)
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid::new(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// A stack of grayscale slices with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageVolume {
    pub id: String,
    /// `(dz, dy, dx)` in millimetres.
    pub spacing: [f64; 3],
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub voxels: Vec<f64>,
}

impl ImageVolume {
    pub fn new(id: impl Into<String>, dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f64>) -> Result<Self> {
        let [depth, height, width] = dims;
        if depth == 0 || height == 0 || width == 0 {
            return Err(Error::validation("dims", format!("all extents must be ≥ 1, got {dims:?}")));
        }
        if voxels.len() != depth * height * width {
            return Err(Error::Shape(format!(
                "{} voxels for a {depth}×{height}×{width} volume",
                voxels.len()
            )));
        }
        if spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::validation("spacing", format!("components must be > 0, got {spacing:?}")));
        }
        if let Some(v) = voxels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation("voxels", format!("intensity {v} outside [0, 1]")));
        }
        Ok(ImageVolume {
            id: id.into(),
            spacing,
            depth,
            height,
            width,
            voxels,
        })
    }

    pub fn slice(&self, z: usize) -> Grid<f64> {
        let n = self.height * self.width;
        Grid::new(self.height, self.width, self.voxels[z * n..(z + 1) * n].to_vec())
    }
}

/// Per-pixel class indices over a 2D (`H×W`) or 3D (`N×H×W`) grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    shape: Vec<usize>,
    classes: u8,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: Vec<usize>, classes: u8, labels: Vec<u8>) -> Result<Self> {
        if !(shape.len() == 2 || shape.len() == 3) {
            return Err(Error::Shape(format!("label map must be 2D or 3D, got {shape:?}")));
        }
        if shape.iter().product::<usize>() != labels.len() {
            return Err(Error::Shape(format!("{} labels for shape {shape:?}", labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::validation("labels", format!("class {l} ≥ class count {classes}")));
        }
        Ok(LabelMap { shape, classes, labels })
    }

    pub fn from_grid(grid: &Grid<u8>, classes: u8) -> Result<Self> {
        Self::new(vec![grid.height, grid.width], classes, grid.data.clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn classes(&self) -> u8 {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn is_2d(&self) -> bool {
        self.shape.len() == 2
    }

    /// `(height, width)` of the spatial plane.
    pub fn plane(&self) -> (usize, usize) {
        let n = self.shape.len();
        (self.shape[n - 2], self.shape[n - 1])
    }

    pub fn depth(&self) -> usize {
        if self.is_2d() {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn slice(&self, z: usize) -> LabelMap {
        let (h, w) = self.plane();
        LabelMap {
            shape: vec![h, w],
            classes: self.classes,
            labels: self.labels[z * h * w..(z + 1) * h * w].to_vec(),
        }
    }

    pub fn to_grid(&self) -> Grid<u8> {
        assert!(self.is_2d(), "to_grid needs a 2D label map");
        Grid::new(self.shape[0], self.shape[1], self.labels.clone())
    }

    /// Stacks equally sized 2D maps into a 3D map.
    pub fn stack(slices: &[LabelMap]) -> Result<LabelMap> {
        let first = slices
            .first()
            .ok_or_else(|| Error::validation("slices", "cannot stack zero slices"))?;
        let (h, w) = first.plane();
        let mut labels = Vec::with_capacity(slices.len() * h * w);
        for s in slices {
            if s.shape != [h, w] {
                return Err(Error::Shape(format!("slice shape {:?} != [{h}, {w}]", s.shape)));
            }
            labels.extend_from_slice(&s.labels);
        }
        LabelMap::new(vec![slices.len(), h, w], first.classes, labels)
    }

    /// Binary mask of one class.
    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes as usize];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    CannyInput,
    EdgeLabel,
    EdgePrediction,
}

/// Single-channel map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    pub kind: EdgeKind,
    pub values: Grid<f64>,
}

impl EdgeMap {
    pub fn new(kind: EdgeKind, values: Grid<f64>) -> Result<Self> {
        if let Some(v) = values.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation("values", format!("edge value {v} outside [0, 1]")));
        }
        if kind == EdgeKind::EdgeLabel && values.data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::validation("values", "edge labels must be binary"));
        }
        Ok(EdgeMap { kind, values })
    }

    pub fn count_on(&self) -> usize {
        self.values.data.iter().filter(|&&v| v > 0.5).count()
    }
}

/// Marks foreground pixels that have a 4-neighbour of a different class.
/// Out-of-image neighbours are clamped to the pixel itself, so the image
/// border never counts as a transition.
pub fn derive_edge_label(labels: &LabelMap) -> Result<EdgeMap> {
    if !labels.is_2d() {
        return Err(Error::Shape("edge labels are derived from 2D label maps".into()));
    }
    let g = labels.to_grid();
    let mut out = Grid::filled(g.height, g.width, 0.0);
    for y in 0..g.height {
        for x in 0..g.width {
            let c = g.get(y, x);
            if c == BACKGROUND {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            let differs = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .any(|&(dy, dx)| g.clamped(yi + dy, xi + dx) != c);
            if differs {
                out.set(y, x, 1.0);
            }
        }
    }
    EdgeMap::new(EdgeKind::EdgeLabel, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Unsplit,
    Train,
    Test,
}

/// One training/evaluation slice with its derived maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub volume_id: String,
    pub slice_index: usize,
    pub image: Grid<f64>,
    pub labels: LabelMap,
    pub canny: EdgeMap,
    pub edge_label: EdgeMap,
}

impl Sample {
    pub fn new(volume_id: &str, slice_index: usize, image: Grid<f64>, labels: LabelMap, canny: CannyParams) -> Result<Self> {
        if labels.plane() != (image.height, image.width) {
            return Err(Error::Shape(format!(
                "label plane {:?} != image {}×{}",
                labels.plane(),
                image.height,
                image.width
            )));
        }
        let canny = canny_edges(&image, canny.low, canny.high)?;
        let edge_label = derive_edge_label(&labels)?;
        Ok(Sample {
            volume_id: volume_id.to_string(),
            slice_index,
            image,
            labels,
            canny,
            edge_label,
        })
    }

    pub fn key(&self) -> (String, usize) {
        (self.volume_id.clone(), self.slice_index)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: SplitTag,
}

impl Dataset {
    /// Slices every volume in order; Canny and edge labels are computed here.
    pub fn from_volumes(volumes: &[(ImageVolume, LabelMap)], canny: CannyParams) -> Result<Self> {
        let mut samples = Vec::new();
        for (vol, labels) in volumes {
            if labels.shape() != [vol.depth, vol.height, vol.width] {
                return Err(Error::Shape(format!(
                    "labels {:?} do not match volume {}",
                    labels.shape(),
                    vol.id
                )));
            }
            for z in 0..vol.depth {
                samples.push(Sample::new(&vol.id, z, vol.slice(z), labels.slice(z), canny)?);
            }
        }
        Ok(Dataset {
            samples,
            split: SplitTag::Unsplit,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            samples: self.samples[range].to_vec(),
            split: self.split,
        }
    }
}

/// Seeded shuffle, then the first `round(ratio·n)` samples go to train.
pub fn split_dataset(dataset: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::validation("ratio", format!("must lie in (0, 1), got {ratio}")));
    }
    if dataset.is_empty() {
        return Err(Error::validation("dataset", "cannot split an empty dataset"));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * n as f64).round() as usize;
    let pick = |idx: &[usize], split| Dataset {
        samples: idx.iter().map(|&i| dataset.samples[i].clone()).collect(),
        split,
    };
    Ok((
        pick(&order[..n_train], SplitTag::Train),
        pick(&order[n_train..], SplitTag::Test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_from(rows: &[&[u8]]) -> LabelMap {
        let h = rows.len();
        let w = rows[0].len();
        LabelMap::new(vec![h, w], NUM_CLASSES, rows.concat()).unwrap()
    }

    #[test]
    fn edge_label_all_background_is_empty() {
        let l = LabelMap::new(vec![6, 7], NUM_CLASSES, vec![0; 42]).unwrap();
        assert_eq!(derive_edge_label(&l).unwrap().count_on(), 0);
    }

    #[test]
    fn edge_label_square_perimeter() {
        let l = labels_from(&[
            &[0, 0, 0, 0, 0],
            &[0, 1, 1, 1, 0],
            &[0, 1, 1, 1, 0],
            &[0, 1, 1, 1, 0],
            &[0, 0, 0, 0, 0],
        ]);
        let e = derive_edge_label(&l).unwrap();
        // Brute-force: a pixel is an edge iff it is foreground and any in-bounds
        // 4-neighbour differs.
        for y in 0..5usize {
            for x in 0..5usize {
                let c = l.labels()[y * 5 + x];
                let mut any = false;
                for (dy, dx) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
                    let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                    if (0..5).contains(&ny) && (0..5).contains(&nx) && l.labels()[(ny * 5 + nx) as usize] != c {
                        any = true;
                    }
                }
                let want = c != 0 && any;
                assert_eq!(e.values.get(y, x) == 1.0, want, "pixel ({y},{x})");
            }
        }
        assert_eq!(e.count_on(), 8);
        assert_eq!(e.values.get(2, 2), 0.0);
    }

    #[test]
    fn edge_label_full_foreground_is_empty() {
        let l = LabelMap::new(vec![4, 4], NUM_CLASSES, vec![2; 16]).unwrap();
        assert_eq!(derive_edge_label(&l).unwrap().count_on(), 0);
    }

    #[test]
    fn edge_label_rejects_3d() {
        let l = LabelMap::new(vec![2, 2, 2], NUM_CLASSES, vec![0; 8]).unwrap();
        assert!(matches!(derive_edge_label(&l), Err(Error::Shape(_))));
    }

    #[test]
    fn label_map_rejects_out_of_range_class() {
        assert!(LabelMap::new(vec![1, 2], 3, vec![0, 3]).is_err());
    }

    #[test]
    fn volume_validation() {
        assert!(ImageVolume::new("v", [1, 1, 2], [1.0; 3], vec![0.0, 1.5]).is_err());
        assert!(ImageVolume::new("v", [1, 1, 1], [0.0, 1.0, 1.0], vec![0.0]).is_err());
        assert!(ImageVolume::new("v", [0, 1, 1], [1.0; 3], vec![]).is_err());
    }

    fn toy_dataset(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| {
                let img = Grid::filled(4, 4, 0.5);
                let lab = LabelMap::new(vec![4, 4], 3, vec![0; 16]).unwrap();
                Sample::new("v", i, img, lab, CannyParams::default()).unwrap()
            })
            .collect();
        Dataset {
            samples,
            split: SplitTag::Unsplit,
        }
    }

    #[test]
    fn split_eight_to_two() {
        let d = toy_dataset(10);
        let (tr, te) = split_dataset(&d, 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert_eq!(tr.split, SplitTag::Train);
        assert_eq!(te.split, SplitTag::Test);
        let (tr, te) = split_dataset(&toy_dataset(2), 0.5, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (1, 1));
    }

    #[test]
    fn split_is_deterministic_disjoint_and_exhaustive() {
        let d = toy_dataset(23);
        let (a1, b1) = split_dataset(&d, 0.7, 9).unwrap();
        let (a2, b2) = split_dataset(&d, 0.7, 9).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        let mut idx: Vec<usize> = a1.samples.iter().chain(&b1.samples).map(|s| s.slice_index).collect();
        idx.sort();
        assert_eq!(idx, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn split_validation() {
        assert!(split_dataset(&toy_dataset(3), 1.0, 0).is_err());
        assert!(split_dataset(&toy_dataset(3), 0.0, 0).is_err());
        assert!(split_dataset(&toy_dataset(0), 0.5, 0).is_err());
    }
}
