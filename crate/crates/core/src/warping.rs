//! Differentiable inverse warping with bilinear sampling.

use std::rc::Rc;

use crate::diff::Var;
use crate::error::{Error, Result};
use crate::geometry::{project, transform_points, unproject, Intrinsics};

/// Transformed points at or below this depth are treated as invalid.
pub const MIN_WARP_DEPTH: f64 = 1e-3;

/// Coordinates this close outside the image border are clamped onto it, so
/// round-off in the projection chain cannot invalidate edge pixels.
pub const BORDER_SLACK: f64 = 1e-9;

/// A reconstructed frame and the pixels it could fill.
#[derive(Debug, Clone)]
pub struct WarpResult<'t> {
    /// `(3,H,W)` reconstructed image; zero where invalid.
    pub image: Var<'t>,
    /// `H*W` entries in {0,1}.
    pub valid: Vec<f64>,
    /// `(2,H,W)` source coordinates that were sampled.
    pub coords: Var<'t>,
}

impl WarpResult<'_> {
    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().sum::<f64>() / self.valid.len() as f64
    }
}

/// Source-pixel corners and weights of one bilinear lookup.
#[derive(Clone, Copy)]
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

fn tap(x: f64, y: f64, h: usize, w: usize) -> Option<Tap> {
    let (wmax, hmax) = ((w - 1) as f64, (h - 1) as f64);
    if !(x >= -BORDER_SLACK
        && x <= wmax + BORDER_SLACK
        && y >= -BORDER_SLACK
        && y <= hmax + BORDER_SLACK)
    {
        return None;
    }
    let (x, y) = (x.clamp(0.0, wmax), y.clamp(0.0, hmax));
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    Some(Tap {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        fx: x - x0 as f64,
        fy: y - y0 as f64,
    })
}

fn sample_inner<'t>(
    image: Var<'t>,
    coords: Var<'t>,
    extra_valid: Option<&[bool]>,
) -> Result<(Var<'t>, Vec<f64>)> {
    let si = image.shape();
    let sc = coords.shape();
    if si.len() != 3 || sc.len() != 3 || sc[0] != 2 {
        return Err(Error::Shape(format!(
            "bilinear_sample expects image (C,H,W) and coords (2,H',W'), got {si:?} and {sc:?}"
        )));
    }
    let (c, h, w) = (si[0], si[1], si[2]);
    let (oh, ow) = (sc[1], sc[2]);
    let n = oh * ow;
    let img = image.value();
    let xy = coords.value();
    let taps: Rc<[Option<Tap>]> = (0..n)
        .map(|i| {
            if extra_valid.is_some_and(|m| !m[i]) {
                None
            } else {
                tap(xy[i], xy[n + i], h, w)
            }
        })
        .collect();
    let mut out = vec![0.0; c * n];
    for (i, t) in taps.iter().enumerate() {
        let Some(t) = t else { continue };
        for ch in 0..c {
            let p = &img[ch * h * w..(ch + 1) * h * w];
            let top = (1.0 - t.fx) * p[t.y0 * w + t.x0] + t.fx * p[t.y0 * w + t.x1];
            let bot = (1.0 - t.fx) * p[t.y1 * w + t.x0] + t.fx * p[t.y1 * w + t.x1];
            out[ch * n + i] = (1.0 - t.fy) * top + t.fy * bot;
        }
    }
    let valid: Vec<f64> = taps.iter().map(|t| if t.is_some() { 1.0 } else { 0.0 }).collect();
    let (ii, ic) = (image.id(), coords.id());
    let taps_bw = taps.clone();
    let var = image.tape().record(
        vec![c, oh, ow],
        out.into(),
        &[image, coords],
        move |g, sink| {
            sink.with(ii, |buf| {
                for (i, t) in taps_bw.iter().enumerate() {
                    let Some(t) = t else { continue };
                    for ch in 0..c {
                        let gv = g[ch * n + i];
                        let base = ch * h * w;
                        buf[base + t.y0 * w + t.x0] += gv * (1.0 - t.fx) * (1.0 - t.fy);
                        buf[base + t.y0 * w + t.x1] += gv * t.fx * (1.0 - t.fy);
                        buf[base + t.y1 * w + t.x0] += gv * (1.0 - t.fx) * t.fy;
                        buf[base + t.y1 * w + t.x1] += gv * t.fx * t.fy;
                    }
                }
            });
            sink.with(ic, |buf| {
                for (i, t) in taps_bw.iter().enumerate() {
                    let Some(t) = t else { continue };
                    let (mut gx, mut gy) = (0.0, 0.0);
                    for ch in 0..c {
                        let p = &img[ch * h * w..(ch + 1) * h * w];
                        let gv = g[ch * n + i];
                        let (a, b) = (p[t.y0 * w + t.x0], p[t.y0 * w + t.x1]);
                        let (d, e) = (p[t.y1 * w + t.x0], p[t.y1 * w + t.x1]);
                        gx += gv * ((1.0 - t.fy) * (b - a) + t.fy * (e - d));
                        gy += gv * ((1.0 - t.fx) * (d - a) + t.fx * (e - b));
                    }
                    buf[i] += gx;
                    buf[n + i] += gy;
                }
            });
        },
    );
    Ok((var, valid))
}

/// Samples `image` (C,H,W) at `coords` (2,H',W') (x then y).
///
/// Coordinates inside `[0,W-1] x [0,H-1]` are valid; everything else
/// samples as 0 with valid = 0. Differentiable w.r.t. image and coords.
pub fn bilinear_sample<'t>(image: Var<'t>, coords: Var<'t>) -> Result<(Var<'t>, Vec<f64>)> {
    sample_inner(image, coords, None)
}

/// Nearest-neighbour lookup of a `(H,W)` map at `(2,H',W')` coordinates,
/// used for instance masks so they stay binary. Out of range gives 0.
pub fn nearest_sample(map: &[f64], h: usize, w: usize, coords: &[f64]) -> Vec<f64> {
    let n = coords.len() / 2;
    (0..n)
        .map(|i| {
            let (x, y) = (coords[i].round(), coords[n + i].round());
            if x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64 {
                map[y as usize * w + x as usize]
            } else {
                0.0
            }
        })
        .collect()
}

/// Reconstructs the target frame by reading `source` at the projections
/// of the target's depth.
///
/// `motion` maps target-camera points into the source camera; with
/// `inverse` the inverse transform is applied instead.
pub fn warp_with<'t>(
    source: Var<'t>,
    target_depth: Var<'t>,
    motion: Var<'t>,
    inverse: bool,
    k: &Intrinsics,
) -> Result<WarpResult<'t>> {
    let si = source.shape();
    let sd = target_depth.shape();
    if si.len() != 3 || sd.len() != 2 || si[1] != sd[0] || si[2] != sd[1] {
        return Err(Error::Shape(format!(
            "warp expects source (C,H,W) and depth (H,W) of equal size, got {si:?} and {sd:?}"
        )));
    }
    if motion.shape() != [6] {
        return Err(Error::Shape(format!(
            "motion must be a 6-vector, got {:?}",
            motion.shape()
        )));
    }
    let points = unproject(target_depth, k)?;
    let moved = transform_points(points, motion, inverse);
    let n = sd[0] * sd[1];
    let zs = moved.value();
    let z_ok: Vec<bool> = zs[2 * n..3 * n].iter().map(|&z| z > MIN_WARP_DEPTH).collect();
    let coords = project(moved, k);
    let (image, valid) = sample_inner(source, coords, Some(&z_ok))?;
    Ok(WarpResult {
        image,
        valid,
        coords,
    })
}

/// `warp_with(source, target_depth, motion, false, k)`.
pub fn warp<'t>(
    source: Var<'t>,
    target_depth: Var<'t>,
    motion: Var<'t>,
    k: &Intrinsics,
) -> Result<WarpResult<'t>> {
    warp_with(source, target_depth, motion, false, k)
}
