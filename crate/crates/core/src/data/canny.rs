use serde::{Deserialize, Serialize};

use super::{EdgeKind, EdgeMap, Grid};
use crate::{Error, Result};

const SIGMA: f64 = 1.0;

/// Hysteresis thresholds as fractions of the maximum gradient magnitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CannyParams {
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams { low: 0.1, high: 0.2 }
    }
}

/// Gaussian smoothing (σ = 1), Sobel gradients, non-maximum suppression and
/// double-threshold hysteresis. `low`/`high` are relative to the largest
/// gradient magnitude in the image, so the result is unchanged by affine
/// intensity rescaling.
pub fn canny_edges(image: &Grid<f64>, low: f64, high: f64) -> Result<EdgeMap> {
    if !(low >= 0.0 && low <= high) {
        return Err(Error::validation("low", format!("need 0 ≤ low ≤ high, got low={low} high={high}")));
    }
    if image.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("image", "non-finite intensity"));
    }
    let (h, w) = (image.height, image.width);
    let lo = image.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = image.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return EdgeMap::new(EdgeKind::CannyInput, Grid::filled(h, w, 0.0));
    }
    let normalized = image.map(|v| (v - lo) / (hi - lo));
    let smooth = gaussian_blur(&normalized, SIGMA);

    let mut mag = Grid::filled(h, w, 0.0);
    let mut dir = Grid::filled(h, w, 0u8);
    for y in 0..h {
        for x in 0..w {
            let p = |dy: isize, dx: isize| smooth.clamped(y as isize + dy, x as isize + dx);
            let gx = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let gy = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            mag.set(y, x, gx.hypot(gy));
            dir.set(y, x, quantize_direction(gy, gx));
        }
    }

    let peak = mag.data.iter().cloned().fold(0.0, f64::max);
    let mut out = Grid::filled(h, w, 0.0);
    if peak <= 0.0 {
        return EdgeMap::new(EdgeKind::CannyInput, out);
    }

    // Non-maximum suppression. Ties along the gradient direction keep the
    // pixel on the negative side only, so a symmetric ridge thins to one pixel.
    let mut thin = Grid::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let m = mag.get(y, x);
            if m <= 0.0 {
                continue;
            }
            let (dy, dx) = match dir.get(y, x) {
                0 => (0, 1),
                1 => (1, 1),
                2 => (1, 0),
                _ => (1, -1),
            };
            let before = neighbour(&mag, y, x, -dy, -dx);
            let after = neighbour(&mag, y, x, dy, dx);
            if m > before && m >= after {
                thin.set(y, x, m);
            }
        }
    }

    let (lo_t, hi_t) = (low * peak, high * peak);
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if thin.get(y, x) >= hi_t && thin.get(y, x) > 0.0 {
                out.set(y, x, 1.0);
                stack.push((y, x));
            }
        }
    }
    while let Some((y, x)) = stack.pop() {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if out.get(ny, nx) == 0.0 && thin.get(ny, nx) >= lo_t && thin.get(ny, nx) > 0.0 {
                    out.set(ny, nx, 1.0);
                    stack.push((ny, nx));
                }
            }
        }
    }
    EdgeMap::new(EdgeKind::CannyInput, out)
}

/// Out-of-image neighbours read as zero magnitude.
fn neighbour(mag: &Grid<f64>, y: usize, x: usize, dy: isize, dx: isize) -> f64 {
    let (ny, nx) = (y as isize + dy, x as isize + dx);
    if ny < 0 || nx < 0 || ny >= mag.height as isize || nx >= mag.width as isize {
        0.0
    } else {
        mag.get(ny as usize, nx as usize)
    }
}

/// 0: horizontal gradient, 1: 45°, 2: vertical, 3: 135°.
fn quantize_direction(gy: f64, gx: f64) -> u8 {
    let mut a = gy.atan2(gx).to_degrees();
    if a < 0.0 {
        a += 180.0;
    }
    if !(22.5..157.5).contains(&a) {
        0
    } else if a < 67.5 {
        1
    } else if a < 112.5 {
        2
    } else {
        3
    }
}

fn gaussian_blur(image: &Grid<f64>, sigma: f64) -> Grid<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (h, w) = (image.height, image.width);
    let mut tmp = Grid::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = (-r..=r)
                .map(|i| k[(i + r) as usize] * image.clamped(y as isize, x as isize + i))
                .sum();
            tmp.set(y, x, v);
        }
    }
    let mut out = Grid::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = (-r..=r)
                .map(|i| k[(i + r) as usize] * tmp.clamped(y as isize + i, x as isize))
                .sum();
            out.set(y, x, v);
        }
    }
    out
}
