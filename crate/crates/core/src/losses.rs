//! Training objectives: occlusion-aware reconstruction, SSIM, edge-aware
//! smoothness, the object-size constraint and their multi-scale assembly.

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::warping::WarpResult;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Number of pyramid levels in the total loss.
pub const NUM_SCALES: usize = 4;
/// Lower bound kept on every height prior.
pub const MIN_PRIOR: f64 = 1e-3;

/// Stand-in residual for invalid pixels; never survives the final mask.
const INVALID_RESIDUAL: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub ssim: f64,
    pub smoothness: f64,
    pub size_constraint: f64,
    pub l2_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reconstruction: 0.85,
            ssim: 0.15,
            smoothness: 0.04,
            size_constraint: 0.0005,
            l2_reg: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.reconstruction,
            self.ssim,
            self.smoothness,
            self.size_constraint,
            self.l2_reg,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invalid(format!("loss weights must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Learnable per-category object height priors.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightPriors {
    pub values: Tensor,
}

impl HeightPriors {
    pub fn new(initial: &[f64]) -> Result<Self> {
        if initial.is_empty() || initial.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Invalid(format!(
                "height priors must be positive, got {initial:?}"
            )));
        }
        Ok(Self {
            values: Tensor::new(&[initial.len()], initial.to_vec())?.with_grad(),
        })
    }

    pub fn get(&self, category: usize) -> Option<f64> {
        self.values.values().get(category).copied()
    }

    pub fn num_categories(&self) -> usize {
        self.values.len()
    }

    /// Restores `p_j >= MIN_PRIOR` after an optimizer step.
    pub fn project_positive(&mut self) {
        self.values
            .values_mut()
            .iter_mut()
            .for_each(|p| *p = p.max(MIN_PRIOR));
    }
}

/// One object's binary mask (row-major `H*W`) and category.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMask {
    pub mask: Vec<f64>,
    pub category: usize,
}

/// Mean over channels of `|a - b|`, shape `(H,W)`.
fn l1_map<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    (a - b).abs().mean_axes(&[0])
}

/// Per-pixel minimum of two residual maps, each restricted to its valid
/// pixels. Where neither is valid the result is 0.
pub fn min_combine<'t>(
    first: Var<'t>,
    first_valid: &[f64],
    second: Var<'t>,
    second_valid: &[f64],
) -> Var<'t> {
    let tape: &'t Tape = first.tape();
    let shape = first.shape();
    let v1 = tape.constant(&shape, first_valid.to_vec());
    let v2 = tape.constant(&shape, second_valid.to_vec());
    let fill = |v: &[f64]| -> Var<'t> {
        tape.constant(
            &shape,
            v.iter().map(|&x| (1.0 - x) * INVALID_RESIDUAL).collect(),
        )
    };
    let any: Vec<f64> = first_valid
        .iter()
        .zip(second_valid)
        .map(|(&a, &b)| 1.0 - (1.0 - a) * (1.0 - b))
        .collect();
    let a = first * v1 + fill(first_valid);
    let b = second * v2 + fill(second_valid);
    a.minimum(b) * tape.constant(&shape, any)
}

/// Occlusion-aware photometric loss: per-pixel minimum of the L1 residuals
/// of the two reconstructions, averaged over pixels (channels are averaged
/// inside each residual).
pub fn reconstruction_loss<'t>(
    prev: &WarpResult<'t>,
    next: &WarpResult<'t>,
    target: Var<'t>,
) -> Result<Var<'t>> {
    let st = target.shape();
    if prev.image.shape() != st || next.image.shape() != st {
        return Err(Error::Shape(format!(
            "reconstruction shapes {:?}, {:?} vs target {st:?}",
            prev.image.shape(),
            next.image.shape()
        )));
    }
    let r1 = l1_map(prev.image, target);
    let r2 = l1_map(next.image, target);
    Ok(min_combine(r1, &prev.valid, r2, &next.valid).mean())
}

/// Dissimilarity map `(1 - SSIM) / 2` clamped to [0,1], computed with 3x3
/// mean pooling and no padding: `(C,H,W) -> (C,H-2,W-2)`.
pub fn ssim_map<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let mu_a = a.box3();
    let mu_b = b.box3();
    let var_a = (a * a).box3() - mu_a * mu_a;
    let var_b = (b * b).box3() - mu_b * mu_b;
    let cov = (a * b).box3() - mu_a * mu_b;
    let num = ((mu_a * mu_b).scale(2.0).offset(SSIM_C1)) * (cov.scale(2.0).offset(SSIM_C2));
    let den = ((mu_a * mu_a + mu_b * mu_b).offset(SSIM_C1)) * ((var_a + var_b).offset(SSIM_C2));
    let ssim = num / den;
    (1.0 - ssim).scale(0.5).clamp(0.0, 1.0)
}

/// Spatial mean of [`ssim_map`].
pub fn ssim_loss<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb || sa.len() < 2 || sa[sa.len() - 1] < 3 || sa[sa.len() - 2] < 3 {
        return Err(Error::Shape(format!(
            "ssim needs equal shapes of at least 3x3, got {sa:?} and {sb:?}"
        )));
    }
    Ok(ssim_map(a, b).mean())
}

/// SSIM term for a pair of reconstructions, min-combined per pixel like the
/// L1 term. Validity is cropped to the pooled interior.
pub fn ssim_reconstruction_loss<'t>(
    prev: &WarpResult<'t>,
    next: &WarpResult<'t>,
    target: Var<'t>,
) -> Result<Var<'t>> {
    let shape = target.shape();
    let (h, w) = (shape[1], shape[2]);
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!("ssim needs at least 3x3, got {shape:?}")));
    }
    let crop = |v: &[f64]| -> Vec<f64> {
        (1..h - 1)
            .flat_map(|y| (1..w - 1).map(move |x| (y, x)))
            .map(|(y, x)| v[y * w + x])
            .collect()
    };
    let s1 = ssim_map(prev.image, target).mean_axes(&[0]);
    let s2 = ssim_map(next.image, target).mean_axes(&[0]);
    Ok(min_combine(s1, &crop(&prev.valid), s2, &crop(&next.valid)).mean())
}

/// `D / mean(D)`.
pub fn normalize_depth(depth: Var<'_>) -> Var<'_> {
    depth / depth.mean()
}

/// Edge-aware first-order smoothness on mean-normalised disparity:
/// `mean(|dx d| e^-|dx I|) + mean(|dy d| e^-|dy I|)` where `d = 1/D`
/// normalised to unit mean and image gradients are channel-averaged.
pub fn smoothness_loss<'t>(depth: Var<'t>, image: Var<'t>) -> Result<Var<'t>> {
    let sd = depth.shape();
    let si = image.shape();
    if sd.len() != 2 || si.len() != 3 || si[1..] != sd[..] {
        return Err(Error::Shape(format!(
            "smoothness expects depth (H,W) and image (C,H,W), got {sd:?} and {si:?}"
        )));
    }
    let (h, w) = (sd[0], sd[1]);
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("smoothness needs at least 2x2, got {sd:?}")));
    }
    let disp = normalize_depth(depth.recip());
    let dx = |v: Var<'t>, axis: usize| v.narrow(axis, 1, w - 1) - v.narrow(axis, 0, w - 1);
    let dy = |v: Var<'t>, axis: usize| v.narrow(axis, 1, h - 1) - v.narrow(axis, 0, h - 1);
    let wx = (-dx(image, 2).abs().mean_axes(&[0])).exp();
    let wy = (-dy(image, 1).abs().mean_axes(&[0])).exp();
    let sx = (dx(disp, 1).abs() * wx).mean();
    let sy = (dy(disp, 0).abs() * wy).mean();
    Ok(sx + sy)
}

/// Vertical extent in pixels of a mask's bounding box; 0 for empty masks.
pub fn mask_height(mask: &[f64], width: usize) -> usize {
    let rows: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.5)
        .map(|(i, _)| i / width)
        .collect();
    match (rows.iter().min(), rows.iter().max()) {
        (Some(lo), Some(hi)) => hi - lo + 1,
        _ => 0,
    }
}

/// Approximate depth of an object of height `prior` (scene units) that spans
/// `height_px` rows: `f_y * p / h`.
pub fn approx_depth(fy: f64, prior: f64, height_px: usize) -> f64 {
    fy * prior / height_px as f64
}

/// Object-size constraint `sum_i |mean_{O_i}(D) - f_y p_t(i) / h_i| / mean(D)`.
///
/// Returns the loss and the number of skipped (empty) masks.
pub fn size_constraint_loss<'t>(
    depth: Var<'t>,
    objects: &[ObjectMask],
    priors: Var<'t>,
    k: &Intrinsics,
) -> Result<(Var<'t>, usize)> {
    let tape: &'t Tape = depth.tape();
    let shape = depth.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("depth must be (H,W), got {shape:?}")));
    }
    let w = shape[1];
    let n_pix = shape[0] * w;
    let mean_depth = depth.mean();
    let mut total = tape.scalar(0.0);
    let mut skipped = 0;
    for obj in objects {
        if obj.mask.len() != n_pix {
            return Err(Error::Shape(format!(
                "mask of {} pixels for depth {shape:?}",
                obj.mask.len()
            )));
        }
        let count: f64 = obj.mask.iter().sum();
        let h = mask_height(&obj.mask, w);
        if count <= 0.0 || h == 0 {
            skipped += 1;
            continue;
        }
        if obj.category >= priors.len() {
            return Err(Error::Invalid(format!(
                "object category {} has no prior ({} known)",
                obj.category,
                priors.len()
            )));
        }
        let m = tape.constant(&shape, obj.mask.clone());
        let object_depth = (depth * m).sum().scale(1.0 / count);
        let approx = priors.index(obj.category).scale(k.fy / h as f64);
        total = total + ((object_depth - approx) / mean_depth).abs();
    }
    if skipped > 0 {
        log::warn!("size constraint skipped {skipped} empty mask(s)");
    }
    Ok((total, skipped))
}

/// `0.5 * sum(w^2)` over the given weights.
pub fn l2_penalty<'t>(tape: &'t Tape, weights: &[Var<'t>]) -> Var<'t> {
    weights
        .iter()
        .fold(tape.scalar(0.0), |acc, w| acc + w.square().sum())
        .scale(0.5)
}

/// Per-scale components of the total loss.
#[derive(Debug, Clone, Copy)]
pub struct ScaleLosses<'t> {
    pub reconstruction: Var<'t>,
    pub ssim: Var<'t>,
    pub smoothness: Var<'t>,
}

/// `sum_i a1 L_rec(i) + a2 L_ssim(i) + a3 L_sm(i) / 2^i  +  a_sc L_sc + l2`.
pub fn total_loss<'t>(
    scales: &[ScaleLosses<'t>],
    size_constraint: Option<Var<'t>>,
    l2: Option<Var<'t>>,
    weights: &LossWeights,
) -> Result<Var<'t>> {
    if scales.len() != NUM_SCALES {
        return Err(Error::Invalid(format!(
            "total loss needs {NUM_SCALES} scales, got {}",
            scales.len()
        )));
    }
    weights.validate()?;
    let mut total = scales[0].reconstruction.tape().scalar(0.0);
    for (i, s) in scales.iter().enumerate() {
        total = total
            + s.reconstruction.scale(weights.reconstruction)
            + s.ssim.scale(weights.ssim)
            + s.smoothness.scale(weights.smoothness / (1u32 << i) as f64);
    }
    if let Some(sc) = size_constraint {
        total = total + sc.scale(weights.size_constraint);
    }
    if let Some(l2) = l2 {
        total = total + l2.scale(weights.l2_reg);
    }
    Ok(total)
}
