use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ImageVolume, LabelMap, NUM_CLASSES, TUMOR, VESSEL};
use crate::rng::substream;
use crate::{Error, Result};

/// Samples per Bézier curve; positions are kept as exact multiples of `1/CURVE_STEPS²`.
const CURVE_STEPS: i64 = 256;
const PHANTOM_SPACING: [f64; 3] = [1.0, 0.7, 0.7];

const BACKGROUND_LEVEL: f64 = 0.45;
const TUMOR_LEVEL: f64 = 0.25;
const VESSEL_LEVEL: f64 = 0.85;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub n_slices: usize,
    pub height: usize,
    pub width: usize,
    pub n_vessels: usize,
    /// Inclusive tube radius range in pixels.
    pub vessel_radius_range: (u32, u32),
    /// Inclusive in-plane tumour semi-axis range in pixels.
    pub tumor_radius_range: (u32, u32),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            n_slices: 8,
            height: 64,
            width: 64,
            n_vessels: 3,
            vessel_radius_range: (1, 2),
            tumor_radius_range: (7, 12),
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("n_slices", self.n_slices), ("height", self.height), ("width", self.width)] {
            if v == 0 {
                return Err(Error::validation(name, "must be ≥ 1"));
            }
        }
        let limit = self.height.min(self.width) as f64 / 2.0;
        for (name, (lo, hi)) in [
            ("vessel_radius_range", self.vessel_radius_range),
            ("tumor_radius_range", self.tumor_radius_range),
        ] {
            if lo < 1 || lo > hi || hi as f64 >= limit {
                return Err(Error::validation(
                    name,
                    format!("need 1 ≤ min ≤ max < {limit}, got ({lo}, {hi})"),
                ));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::validation("noise_sigma", format!("must be ≥ 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Quadratic Bézier centreline `(x, y)` control points and tube radius for one slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VesselPath {
    pub control: [[i64; 2]; 3],
    pub radius: i64,
}

impl VesselPath {
    /// Curve sample `k` of `CURVE_STEPS`, scaled by `CURVE_STEPS²`.
    fn sample(&self, k: i64) -> (i64, i64) {
        let s = CURVE_STEPS;
        let (a, b, c) = ((s - k) * (s - k), 2 * k * (s - k), k * k);
        let [p0, p1, p2] = self.control;
        (
            a * p0[0] + b * p1[0] + c * p2[0],
            a * p0[1] + b * p1[1] + c * p2[1],
        )
    }
}

/// Stamps a disc at every curve sample. Pixel `(x, y)` is inside the tube iff
/// some sample lies within `radius` of it; the test is exact integer arithmetic.
pub fn rasterize_vessel(path: &VesselPath, height: usize, width: usize) -> Vec<bool> {
    let s2 = CURVE_STEPS * CURVE_STEPS;
    let r = path.radius;
    let r2 = (r * s2) * (r * s2);
    let mut mask = vec![false; height * width];
    for k in 0..=CURVE_STEPS {
        let (bx, by) = path.sample(k);
        let x_lo = (bx.div_euclid(s2) - r).max(0);
        let x_hi = (bx.div_euclid(s2) + r + 1).min(width as i64 - 1);
        let y_lo = (by.div_euclid(s2) - r).max(0);
        let y_hi = (by.div_euclid(s2) + r + 1).min(height as i64 - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let dx = x * s2 - bx;
                let dy = y * s2 - by;
                if dx * dx + dy * dy <= r2 {
                    mask[y as usize * width + x as usize] = true;
                }
            }
        }
    }
    mask
}

struct Ellipsoid {
    centre: [i64; 3],
    semi: [i64; 3],
}

impl Ellipsoid {
    fn contains(&self, z: i64, y: i64, x: i64) -> bool {
        let [cz, cy, cx] = self.centre;
        let [c, b, a] = self.semi.map(|v| v as i128);
        let (dz, dy, dx) = ((z - cz) as i128, (y - cy) as i128, (x - cx) as i128);
        dx * dx * b * b * c * c + dy * dy * a * a * c * c + dz * dz * a * a * b * b <= a * a * b * b * c * c
    }
}

struct Wave {
    f: [f64; 3],
    phase: f64,
}

/// Paints `n_vessels` bright Bézier tubes (class 2) and one darker ellipsoid
/// (class 1) on a textured background. Geometry is integer-only, so the label
/// map is identical on every platform for a given seed.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(ImageVolume, LabelMap)> {
    spec.validate()?;
    let (n, h, w) = (spec.n_slices, spec.height, spec.width);
    let mut rng = substream(spec.seed, "phantom", 0);

    let (tr_lo, tr_hi) = spec.tumor_radius_range;
    let a = rng.random_range(tr_lo..=tr_hi) as i64;
    let b = rng.random_range(tr_lo..=tr_hi) as i64;
    let c = rng.random_range((n as i64 / 2).max(1)..=(n as i64).max(1));
    let cx = rng.random_range(a..=(w as i64 - 1 - a).max(a));
    let cy = rng.random_range(b..=(h as i64 - 1 - b).max(b));
    let tumor = Ellipsoid {
        centre: [(n as i64 - 1) / 2, cy, cx],
        semi: [c, b, a],
    };

    let vessel_ends: Vec<([[i64; 2]; 3], [[i64; 2]; 3], i64)> = (0..spec.n_vessels)
        .map(|i| {
            let (wi, hi) = (w as i64 - 1, h as i64 - 1);
            let first = if i % 2 == 0 {
                [
                    [0, rng.random_range(0..=hi)],
                    [rng.random_range(0..=wi), rng.random_range(0..=hi)],
                    [wi, rng.random_range(0..=hi)],
                ]
            } else {
                [
                    [rng.random_range(0..=wi), 0],
                    [rng.random_range(0..=wi), rng.random_range(0..=hi)],
                    [rng.random_range(0..=wi), hi],
                ]
            };
            let drift = (w.min(h) as i64 / 8).max(1);
            let last = first.map(|[x, y]| {
                [
                    (x + rng.random_range(-drift..=drift)).clamp(0, wi),
                    (y + rng.random_range(-drift..=drift)).clamp(0, hi),
                ]
            });
            let (vr_lo, vr_hi) = spec.vessel_radius_range;
            (first, last, rng.random_range(vr_lo..=vr_hi) as i64)
        })
        .collect();

    let waves: Vec<Wave> = (0..3)
        .map(|_| Wave {
            f: [
                rng.random_range(0.05..0.3),
                rng.random_range(0.05..0.3),
                rng.random_range(0.1..0.6),
            ],
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");

    let mut labels = vec![0u8; n * h * w];
    let mut voxels = vec![0.0; n * h * w];
    for z in 0..n {
        let plane = &mut labels[z * h * w..(z + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                if tumor.contains(z as i64, y as i64, x as i64) {
                    plane[y * w + x] = TUMOR;
                }
            }
        }
        for (first, last, radius) in &vessel_ends {
            let path = VesselPath {
                control: interpolate_control(first, last, z, n),
                radius: *radius,
            };
            for (l, on) in plane.iter_mut().zip(rasterize_vessel(&path, h, w)) {
                if on {
                    *l = VESSEL;
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let i = z * h * w + y * w + x;
                let texture: f64 = waves
                    .iter()
                    .map(|wv| (wv.f[0] * x as f64 + wv.f[1] * y as f64 + wv.f[2] * z as f64 + wv.phase).sin())
                    .sum::<f64>()
                    / 3.0;
                let base = match labels[i] {
                    TUMOR => TUMOR_LEVEL + 0.02 * texture,
                    VESSEL => VESSEL_LEVEL,
                    _ => BACKGROUND_LEVEL + 0.06 * texture,
                };
                let eps = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                // Quantised to the 16-bit grid used on disk.
                voxels[i] = ((base + eps).clamp(0.0, 1.0) * 65535.0).round() / 65535.0;
            }
        }
    }

    let id = format!("phantom_{:016x}", spec.seed);
    let volume = ImageVolume::new(id, [n, h, w], PHANTOM_SPACING, voxels)?;
    let labels = LabelMap::new(vec![n, h, w], NUM_CLASSES, labels)?;
    Ok((volume, labels))
}

/// Linear drift of control points from the first to the last slice, in integer arithmetic.
fn interpolate_control(first: &[[i64; 2]; 3], last: &[[i64; 2]; 3], z: usize, n: usize) -> [[i64; 2]; 3] {
    if n <= 1 {
        return *first;
    }
    let (z, d) = (z as i64, n as i64 - 1);
    let mut out = *first;
    for (o, (f, l)) in out.iter_mut().zip(first.iter().zip(last)) {
        for k in 0..2 {
            o[k] = (f[k] * (d - z) + l[k] * z).div_euclid(d);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_tumor_radius_is_rejected() {
        let spec = PhantomSpec {
            n_vessels: 0,
            tumor_radius_range: (0, 0),
            ..PhantomSpec::default()
        };
        match generate_phantom(&spec) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "tumor_radius_range"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn oversized_radius_is_rejected() {
        let spec = PhantomSpec {
            vessel_radius_range: (1, 32),
            ..PhantomSpec::default()
        };
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = PhantomSpec {
            seed: 7,
            ..PhantomSpec::default()
        };
        let (a, la) = generate_phantom(&spec).unwrap();
        let (b, lb) = generate_phantom(&spec).unwrap();
        assert_eq!(a.voxels, b.voxels);
        assert_eq!(la, lb);
        let (c, _) = generate_phantom(&PhantomSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.voxels, c.voxels);
    }

    #[test]
    fn every_class_is_present() {
        let (_, labels) = generate_phantom(&PhantomSpec::default()).unwrap();
        let h = labels.histogram();
        assert!(h.iter().all(|&c| c > 0), "histogram {h:?}");
    }

    /// Independent per-pixel oracle: the minimum squared distance from the
    /// pixel to the curve samples, compared against r².
    fn tube_oracle(path: &VesselPath, h: usize, w: usize) -> Vec<bool> {
        let s2 = (CURVE_STEPS * CURVE_STEPS) as i128;
        let r2 = (path.radius as i128 * s2).pow(2);
        let samples: Vec<(i128, i128)> = (0..=CURVE_STEPS)
            .map(|k| {
                let t = k as i128;
                let s = CURVE_STEPS as i128;
                let [p0, p1, p2] = path.control.map(|p| p.map(|v| v as i128));
                let bx = (s - t) * (s - t) * p0[0] + 2 * t * (s - t) * p1[0] + t * t * p2[0];
                let by = (s - t) * (s - t) * p0[1] + 2 * t * (s - t) * p1[1] + t * t * p2[1];
                (bx, by)
            })
            .collect();
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let px = x as i128 * s2;
                let py = y as i128 * s2;
                let d = samples
                    .iter()
                    .map(|(bx, by)| (px - bx).pow(2) + (py - by).pow(2))
                    .min()
                    .unwrap();
                out[y * w + x] = d <= r2;
            }
        }
        out
    }

    #[test]
    fn rasterization_matches_distance_oracle() {
        let path = VesselPath {
            control: [[0, 10], [30, 60], [63, 5]],
            radius: 3,
        };
        assert_eq!(rasterize_vessel(&path, 64, 64), tube_oracle(&path, 64, 64));
    }

    #[test]
    fn vessel_fraction_matches_oracle_for_seed_seven() {
        let spec = PhantomSpec {
            seed: 7,
            n_vessels: 3,
            ..PhantomSpec::default()
        };
        let (_, labels) = generate_phantom(&spec).unwrap();
        // Rebuild the vessel geometry from the same stream and rasterize with the oracle.
        let (n, h, w) = (spec.n_slices, spec.height, spec.width);
        let mut rng = substream(spec.seed, "phantom", 0);
        let (lo, hi) = spec.tumor_radius_range;
        let a = rng.random_range(lo..=hi) as i64;
        let b = rng.random_range(lo..=hi) as i64;
        let _c = rng.random_range((n as i64 / 2).max(1)..=(n as i64).max(1));
        let _cx = rng.random_range(a..=(w as i64 - 1 - a).max(a));
        let _cy = rng.random_range(b..=(h as i64 - 1 - b).max(b));
        let mut expected = 0usize;
        let mut ends = Vec::new();
        for i in 0..spec.n_vessels {
            let (wi, hi) = (w as i64 - 1, h as i64 - 1);
            let first = if i % 2 == 0 {
                [
                    [0, rng.random_range(0..=hi)],
                    [rng.random_range(0..=wi), rng.random_range(0..=hi)],
                    [wi, rng.random_range(0..=hi)],
                ]
            } else {
                [
                    [rng.random_range(0..=wi), 0],
                    [rng.random_range(0..=wi), rng.random_range(0..=hi)],
                    [rng.random_range(0..=wi), hi],
                ]
            };
            let drift = (w.min(h) as i64 / 8).max(1);
            let last = first.map(|[x, y]| {
                [
                    (x + rng.random_range(-drift..=drift)).clamp(0, wi),
                    (y + rng.random_range(-drift..=drift)).clamp(0, hi),
                ]
            });
            let (vlo, vhi) = spec.vessel_radius_range;
            ends.push((first, last, rng.random_range(vlo..=vhi) as i64));
        }
        for z in 0..n {
            let mut union = vec![false; h * w];
            for (first, last, r) in &ends {
                let path = VesselPath {
                    control: interpolate_control(first, last, z, n),
                    radius: *r,
                };
                for (u, v) in union.iter_mut().zip(tube_oracle(&path, h, w)) {
                    *u |= v;
                }
            }
            expected += union.iter().filter(|&&v| v).count();
        }
        assert_eq!(labels.histogram()[VESSEL as usize], expected);
    }
}
