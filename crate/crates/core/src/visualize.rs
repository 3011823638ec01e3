//! Depth map images: grayscale and a viridis colour map on inverse depth.

use std::path::Path;

use crate::dataset::{write_gray_png, write_rgb_png};
use crate::error::{Error, Result};

/// Viridis sampled at multiples of 1/8.
const VIRIDIS: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 82.0, 139.0],
    [44.0, 114.0, 142.0],
    [33.0, 145.0, 140.0],
    [40.0, 174.0, 128.0],
    [94.0, 201.0, 98.0],
    [173.0, 220.0, 48.0],
    [253.0, 231.0, 37.0],
];

/// Colour for `t` in [0,1] (clamped), channel values in [0,1].
pub fn viridis(t: f64) -> [f64; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [0, 1, 2].map(|c| (a[c] + f * (b[c] - a[c])) / 255.0)
}

/// Inverse depth scaled to [0,1] per image; near is 1. Non-finite or
/// non-positive depths map to 0.
pub fn normalized_inverse_depth(depth: &[f64]) -> Vec<f64> {
    let inv: Vec<Option<f64>> = depth
        .iter()
        .map(|&d| (d.is_finite() && d > 0.0).then(|| 1.0 / d))
        .collect();
    let (lo, hi) = inv
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    inv.iter()
        .map(|v| match v {
            Some(v) if range > 0.0 => (v - lo) / range,
            Some(_) => 0.5,
            None => 0.0,
        })
        .collect()
}

/// `(3,H,W)` viridis rendering of inverse depth.
pub fn colorize_depth(depth: &[f64]) -> Vec<f64> {
    let n = depth.len();
    let mut out = vec![0.0; 3 * n];
    for (i, t) in normalized_inverse_depth(depth).into_iter().enumerate() {
        let c = viridis(t);
        for k in 0..3 {
            out[k * n + i] = c[k];
        }
    }
    out
}

/// Writes `<stem>_gray.png` and `<stem>_color.png` into `dir`.
pub fn save_depth_images(dir: &Path, stem: &str, depth: &[f64], height: usize, width: usize) -> Result<()> {
    if depth.len() != height * width {
        return Err(Error::Shape(format!(
            "depth of {} values for a {height}x{width} image",
            depth.len()
        )));
    }
    let gray: Vec<u8> = normalized_inverse_depth(depth)
        .iter()
        .map(|t| (t * 255.0).round() as u8)
        .collect();
    write_gray_png(&dir.join(format!("{stem}_gray.png")), &gray, height, width)?;
    write_rgb_png(&dir.join(format!("{stem}_color.png")), &colorize_depth(depth), height, width)
}
