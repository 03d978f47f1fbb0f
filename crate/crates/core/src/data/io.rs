use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EdgeMap, ImageVolume, LabelMap, PhantomSpec, NUM_CLASSES};
use crate::{Error, Result};

/// Label palette: background black, tumour red, vessel green.
const PALETTE: [u8; 9] = [0, 0, 0, 220, 40, 40, 40, 200, 60];

/// Contents of `meta.json` next to the slice images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub spacing: [f64; 3],
    pub seed: Option<u64>,
    pub spec: Option<PhantomSpec>,
}

fn slice_name(prefix: &str, z: usize) -> String {
    format!("{prefix}_{z:04}.png")
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

fn write_png(path: &Path, width: usize, height: usize, setup: impl FnOnce(&mut png::Encoder<BufWriter<File>>), bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    setup(&mut enc);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Decoded PNG without transformations: raw samples, dims, colour type, bit depth.
fn read_png(path: &Path) -> Result<(Vec<u8>, usize, usize, png::ColorType, png::BitDepth)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    buf.truncate(info.buffer_size());
    Ok((buf, info.width as usize, info.height as usize, info.color_type, info.bit_depth))
}

/// Writes `<root>/<volume.id>/` with 16-bit grayscale slices, 8-bit indexed
/// label slices and `meta.json`. Returns the volume directory.
pub fn save_volume_dir(
    root: &Path,
    volume: &ImageVolume,
    labels: Option<&LabelMap>,
    seed: Option<u64>,
    spec: Option<&PhantomSpec>,
) -> Result<PathBuf> {
    if let Some(l) = labels {
        if l.shape() != [volume.depth, volume.height, volume.width] {
            return Err(Error::Shape(format!(
                "labels {:?} do not match volume {}×{}×{}",
                l.shape(),
                volume.depth,
                volume.height,
                volume.width
            )));
        }
        if l.classes() > NUM_CLASSES {
            return Err(Error::validation("labels", "palette covers three classes"));
        }
    }
    let dir = root.join(&volume.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (h, w) = (volume.height, volume.width);
    for z in 0..volume.depth {
        let bytes: Vec<u8> = volume.voxels[z * h * w..(z + 1) * h * w]
            .iter()
            .flat_map(|&v| ((v * 65535.0).round() as u16).to_be_bytes())
            .collect();
        write_png(
            &dir.join(slice_name("slice", z)),
            w,
            h,
            |e| {
                e.set_color(png::ColorType::Grayscale);
                e.set_depth(png::BitDepth::Sixteen);
            },
            &bytes,
        )?;
        if let Some(l) = labels {
            write_png(
                &dir.join(slice_name("label", z)),
                w,
                h,
                |e| {
                    e.set_color(png::ColorType::Indexed);
                    e.set_depth(png::BitDepth::Eight);
                    e.set_palette(&PALETTE[..]);
                },
                &l.labels()[z * h * w..(z + 1) * h * w],
            )?;
        }
    }
    let meta = VolumeMeta {
        spacing: volume.spacing,
        seed,
        spec: spec.cloned(),
    };
    let path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

/// Reads one volume directory. Labels are `None` when no `label_####.png` exists.
pub fn load_volume_dir(dir: &Path) -> Result<(ImageVolume, Option<LabelMap>, VolumeMeta)> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: VolumeMeta = serde_json::from_str(&text).map_err(|e| png_err(&meta_path, e))?;
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".into());

    let mut voxels = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut depth = 0;
    let mut has_labels = dir.join(slice_name("label", 0)).exists();
    loop {
        let path = dir.join(slice_name("slice", depth));
        if !path.exists() {
            break;
        }
        let (buf, w, h, color, bits) = read_png(&path)?;
        if color != png::ColorType::Grayscale || bits != png::BitDepth::Sixteen {
            return Err(png_err(&path, "expected 16-bit grayscale"));
        }
        if *dims.get_or_insert((h, w)) != (h, w) {
            return Err(Error::Shape(format!("{}: slice size {h}×{w} differs", path.display())));
        }
        voxels.extend(buf.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0));
        if has_labels {
            let lpath = dir.join(slice_name("label", depth));
            if !lpath.exists() {
                has_labels = false;
            } else {
                let (lbuf, lw, lh, lcolor, lbits) = read_png(&lpath)?;
                if !matches!(lcolor, png::ColorType::Indexed | png::ColorType::Grayscale) || lbits != png::BitDepth::Eight {
                    return Err(png_err(&lpath, "expected 8-bit indexed labels"));
                }
                if (lh, lw) != (h, w) {
                    return Err(Error::Shape(format!("{}: label size {lh}×{lw} != {h}×{w}", lpath.display())));
                }
                labels.extend_from_slice(&lbuf);
            }
        }
        depth += 1;
    }
    let (h, w) = dims.ok_or_else(|| Error::validation("volume", format!("no slices in {}", dir.display())))?;
    let volume = ImageVolume::new(id, [depth, h, w], meta.spacing, voxels)?;
    let labels = if has_labels {
        Some(LabelMap::new(vec![depth, h, w], NUM_CLASSES, labels)?)
    } else {
        None
    };
    Ok((volume, labels, meta))
}

/// Loads every labelled volume directory under `root`, sorted by name.
pub fn load_dataset_dir(root: &Path) -> Result<Vec<(ImageVolume, LabelMap)>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::validation("data", format!("no volume directories under {}", root.display())));
    }
    dirs.iter()
        .map(|d| {
            let (v, l, _) = load_volume_dir(d)?;
            let l = l.ok_or_else(|| Error::validation("labels", format!("{} has no label slices", d.display())))?;
            Ok((v, l))
        })
        .collect()
}

/// 8-bit grayscale dump of an edge map, `0 → 0` and `1 → 255`.
pub fn save_edge_png(path: &Path, edges: &EdgeMap) -> Result<()> {
    let g = &edges.values;
    let bytes: Vec<u8> = g.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_png(
        path,
        g.width,
        g.height,
        |e| {
            e.set_color(png::ColorType::Grayscale);
            e.set_depth(png::BitDepth::Eight);
        },
        &bytes,
    )
}

/// One 2D label map as an indexed PNG with the label palette.
pub fn save_label_png(path: &Path, labels: &LabelMap) -> Result<()> {
    if !labels.is_2d() || labels.classes() > NUM_CLASSES {
        return Err(Error::validation("labels", "expected a 2D map with at most three classes"));
    }
    let (h, w) = labels.plane();
    write_png(
        path,
        w,
        h,
        |e| {
            e.set_color(png::ColorType::Indexed);
            e.set_depth(png::BitDepth::Eight);
            e.set_palette(&PALETTE[..]);
        },
        labels.labels(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_phantom;

    #[test]
    fn round_trip_is_exact() {
        let spec = PhantomSpec {
            n_slices: 3,
            height: 20,
            width: 24,
            tumor_radius_range: (3, 5),
            vessel_radius_range: (1, 2),
            seed: 3,
            ..PhantomSpec::default()
        };
        let (vol, lab) = generate_phantom(&spec).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dir = save_volume_dir(tmp.path(), &vol, Some(&lab), Some(3), Some(&spec)).unwrap();
        let (v2, l2, meta) = load_volume_dir(&dir).unwrap();
        assert_eq!(v2, vol);
        assert_eq!(l2.unwrap(), lab);
        assert_eq!(meta.spec.unwrap(), spec);
        let all = load_dataset_dir(tmp.path()).unwrap();
        assert_eq!(all.len(), 1);
    }

    #[test]
    fn unlabelled_volume_loads_without_labels() {
        let vol = ImageVolume::new("v", [2, 3, 3], [1.0, 0.7, 0.7], vec![0.5; 18]).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dir = save_volume_dir(tmp.path(), &vol, None, None, None).unwrap();
        let (v2, l2, _) = load_volume_dir(&dir).unwrap();
        assert!(l2.is_none());
        assert_eq!(v2.depth, 2);
        assert!(load_dataset_dir(tmp.path()).is_err());
    }
}
