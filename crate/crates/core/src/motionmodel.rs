//! Instance-mask algebra, masked ego-motion estimation, per-object motion
//! and the composed full warp.

use crate::diff::{concat, Var};
use crate::error::{Error, Result};
use crate::geometry::{pixel_rays, Intrinsics, SE3Params};
use crate::warping::{nearest_sample, warp_with, WarpResult};

/// Instance-index maps for the three frames of a triplet. Pixel value `k > 0`
/// belongs to instance `k`, whose category is `categories[k - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMasks {
    pub height: usize,
    pub width: usize,
    pub frames: [Vec<u8>; 3],
    pub categories: Vec<usize>,
}

impl InstanceMasks {
    pub fn new(height: usize, width: usize, frames: [Vec<u8>; 3], categories: Vec<usize>) -> Result<Self> {
        let masks = Self { height, width, frames, categories };
        masks.validate()?;
        Ok(masks)
    }

    /// Masks with no instances.
    pub fn empty(height: usize, width: usize) -> Self {
        let blank = vec![0u8; height * width];
        Self {
            height,
            width,
            frames: [blank.clone(), blank.clone(), blank],
            categories: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.categories.len() > u8::MAX as usize {
            return Err(Error::Invalid(format!("{} instances exceed 255", self.categories.len())));
        }
        for (f, map) in self.frames.iter().enumerate() {
            if map.len() != n {
                return Err(Error::Shape(format!(
                    "mask of frame {} has {} pixels, expected {n}",
                    f + 1,
                    map.len()
                )));
            }
            if let Some(&k) = map.iter().find(|&&k| k as usize > self.categories.len()) {
                return Err(Error::Invalid(format!(
                    "mask of frame {} references instance {k} but only {} are known",
                    f + 1,
                    self.categories.len()
                )));
            }
        }
        Ok(())
    }

    pub fn num_instances(&self) -> usize {
        self.categories.len()
    }

    /// Binary mask of instance `k` (1-based) in frame `frame` (0-based).
    pub fn instance(&self, frame: usize, k: u8) -> Vec<f64> {
        instance_mask(&self.frames[frame], k)
    }

    /// Keeps every second row and column, starting at the first.
    pub fn downsampled(&self) -> Self {
        let (h, w) = (self.height / 2, self.width / 2);
        let pick = |m: &Vec<u8>| -> Vec<u8> {
            (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .map(|(y, x)| m[2 * y * self.width + 2 * x])
                .collect()
        };
        Self {
            height: h,
            width: w,
            frames: [pick(&self.frames[0]), pick(&self.frames[1]), pick(&self.frames[2])],
            categories: self.categories.clone(),
        }
    }

    /// Left-right mirror of every frame.
    pub fn flipped(&self) -> Self {
        let flip = |m: &Vec<u8>| -> Vec<u8> {
            m.chunks(self.width)
                .flat_map(|row| row.iter().rev().copied())
                .collect()
        };
        Self {
            frames: [flip(&self.frames[0]), flip(&self.frames[1]), flip(&self.frames[2])],
            ..self.clone()
        }
    }
}

pub fn instance_mask(map: &[u8], k: u8) -> Vec<f64> {
    map.iter().map(|&v| if v == k { 1.0 } else { 0.0 }).collect()
}

/// Complement of the union of all instances.
pub fn static_mask(map: &[u8]) -> Vec<f64> {
    instance_mask(map, 0)
}

/// Pixels that are static in all three frames.
pub fn ego_input_mask(s1: &[u8], s2: &[u8], s3: &[u8]) -> Vec<f64> {
    s1.iter()
        .zip(s2)
        .zip(s3)
        .map(|((&a, &b), &c)| if a == 0 && b == 0 && c == 0 { 1.0 } else { 0.0 })
        .collect()
}

/// Multiplies every channel of a `(C,H,W)` image by an `H*W` mask.
pub fn mask_image<'t>(image: Var<'t>, mask: &[f64]) -> Var<'t> {
    let s = image.shape();
    image * image.tape().constant(&[1, s[1], s[2]], mask.to_vec())
}

/// Runs a motion network on the channel-stacked triplet after multiplying
/// each frame by `mask`.
pub fn masked_motion<'t, F>(frames: [Var<'t>; 3], mask: &[f64], net: &F) -> Result<(Var<'t>, Var<'t>)>
where
    F: Fn(Var<'t>) -> Result<(Var<'t>, Var<'t>)>,
{
    let masked: Vec<Var<'t>> = frames.iter().map(|&f| mask_image(f, mask)).collect();
    net(concat(&masked, 0)?)
}

/// Ego-motion `(E_12, E_23)` from the triplet restricted to `v`.
pub fn estimate_ego<'t, F>(frames: [Var<'t>; 3], v: &[f64], net: &F) -> Result<(Var<'t>, Var<'t>)>
where
    F: Fn(Var<'t>) -> Result<(Var<'t>, Var<'t>)>,
{
    masked_motion(frames, v, net)
}

/// Instance map of a source frame carried into the target frame by a warp.
/// Pixels the warp could not fill read 0.
pub fn warp_instance_map(map: &[u8], warp: &WarpResult<'_>) -> Vec<u8> {
    let s = warp.coords.shape();
    let (h, w) = (s[1], s[2]);
    let as_f: Vec<f64> = map.iter().map(|&k| k as f64).collect();
    nearest_sample(&as_f, h, w, &warp.coords.value())
        .into_iter()
        .zip(&warp.valid)
        .map(|(k, &v)| if v > 0.5 { k as u8 } else { 0 })
        .collect()
}

/// Motion estimate for one instance.
#[derive(Debug, Clone, Copy)]
pub struct ObjectMotion<'t> {
    /// 1-based instance index.
    pub instance: u8,
    pub prev_to_mid: Var<'t>,
    pub mid_to_next: Var<'t>,
    /// Set when the instance is missing from frame 1 (after warping) or
    /// frame 2; the motion is then zero.
    pub prev_absent: bool,
    /// Same for the frame 2/frame 3 pair.
    pub next_absent: bool,
}

impl ObjectMotion<'_> {
    pub fn params(&self) -> (SE3Params, SE3Params) {
        let a = SE3Params::from_slice(&self.prev_to_mid.value()).expect("6-vector");
        let b = SE3Params::from_slice(&self.mid_to_next.value()).expect("6-vector");
        (a, b)
    }
}

pub type ObjectMotions<'t> = Vec<ObjectMotion<'t>>;

/// Per-instance motion from ego-compensated inputs. The ego warps are
/// detached so the object path never routes gradient into ego-motion.
pub fn estimate_object_motion<'t, F>(
    ego_prev: &WarpResult<'t>,
    mid: Var<'t>,
    ego_next: &WarpResult<'t>,
    masks: &InstanceMasks,
    net: &F,
) -> Result<ObjectMotions<'t>>
where
    F: Fn(Var<'t>) -> Result<(Var<'t>, Var<'t>)>,
{
    let tape = mid.tape();
    let warped_prev = warp_instance_map(&masks.frames[0], ego_prev);
    let warped_next = warp_instance_map(&masks.frames[2], ego_next);
    let (prev_img, next_img) = (ego_prev.image.detach(), ego_next.image.detach());
    let mut out = Vec::with_capacity(masks.num_instances());
    for k in 1..=masks.num_instances() as u8 {
        let m1 = instance_mask(&warped_prev, k);
        let m2 = masks.instance(1, k);
        let m3 = instance_mask(&warped_next, k);
        let nonempty = |m: &[f64]| m.iter().any(|&v| v > 0.0);
        let prev_absent = !(nonempty(&m1) && nonempty(&m2));
        let next_absent = !(nonempty(&m3) && nonempty(&m2));
        let (mut a, mut b) = if prev_absent && next_absent {
            (tape.constant(&[6], vec![0.0; 6]), tape.constant(&[6], vec![0.0; 6]))
        } else {
            let stacked = concat(
                &[mask_image(prev_img, &m1), mask_image(mid, &m2), mask_image(next_img, &m3)],
                0,
            )?;
            net(stacked)?
        };
        if prev_absent {
            log::debug!("instance {k} missing from frames 1/2, motion set to zero");
            a = tape.constant(&[6], vec![0.0; 6]);
        }
        if next_absent {
            log::debug!("instance {k} missing from frames 2/3, motion set to zero");
            b = tape.constant(&[6], vec![0.0; 6]);
        }
        out.push(ObjectMotion {
            instance: k,
            prev_to_mid: a,
            mid_to_next: b,
            prev_absent,
            next_absent,
        });
    }
    Ok(out)
}

/// Result of compositing the ego warp with per-object warps.
#[derive(Debug, Clone)]
pub struct FullWarp<'t> {
    pub warp: WarpResult<'t>,
    /// Fraction of pixels covered by neither `V` nor any target mask.
    pub uncovered_fraction: f64,
}

/// Composes `ego * V + sum_i warp(ego, D, M_i) * O_i(S_target)`.
///
/// `motions` holds one `(instance, motion)` pair per object; `inverse`
/// selects the inverse transform as for the ego warp of the next frame.
pub fn compose_warp<'t>(
    ego: &WarpResult<'t>,
    target_depth: Var<'t>,
    motions: &[(u8, Var<'t>)],
    inverse: bool,
    target_map: &[u8],
    v: &[f64],
    k: &Intrinsics,
) -> Result<FullWarp<'t>> {
    let s = ego.image.shape();
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    if target_map.len() != n || v.len() != n {
        return Err(Error::Shape(format!(
            "compose_warp masks of {} and {} pixels for a {h}x{w} warp",
            target_map.len(),
            v.len()
        )));
    }
    let mut image = mask_image(ego.image, v);
    let mut valid: Vec<f64> = ego.valid.iter().zip(v).map(|(a, b)| a * b).collect();
    let mut covered = v.to_vec();
    let ego_image = ego.image.detach();
    for &(inst, motion) in motions {
        let region = instance_mask(target_map, inst);
        if region.iter().all(|&r| r == 0.0) {
            continue;
        }
        let obj = warp_with(ego_image, target_depth, motion, inverse, k)?;
        let ego_ok = nearest_sample(&ego.valid, h, w, &obj.coords.value());
        image = image + mask_image(obj.image, &region);
        for i in 0..n {
            valid[i] += region[i] * obj.valid[i] * ego_ok[i];
            covered[i] += region[i];
        }
    }
    let uncovered = covered.iter().filter(|&&c| c == 0.0).count() as f64 / n as f64;
    Ok(FullWarp {
        warp: WarpResult {
            image,
            valid,
            coords: ego.coords,
        },
        uncovered_fraction: uncovered,
    })
}

/// Ego warp of `source` followed by [`compose_warp`].
#[allow(clippy::too_many_arguments)]
pub fn full_warp<'t>(
    source: Var<'t>,
    target_depth: Var<'t>,
    ego_motion: Var<'t>,
    inverse: bool,
    motions: &[(u8, Var<'t>)],
    target_map: &[u8],
    v: &[f64],
    k: &Intrinsics,
) -> Result<FullWarp<'t>> {
    let ego = warp_with(source, target_depth, ego_motion, inverse, k)?;
    compose_warp(&ego, target_depth, motions, inverse, target_map, v, k)
}

/// Mean displacement of an object's points under a motion, and its unit
/// direction (zero when the displacement vanishes).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionVector {
    pub mean: [f64; 3],
    pub direction: [f64; 3],
}

pub fn object_motion_vectors(
    motion: &SE3Params,
    depth: &[f64],
    mask: &[f64],
    height: usize,
    width: usize,
    k: &Intrinsics,
) -> Result<MotionVector> {
    let n = height * width;
    if depth.len() != n || mask.len() != n {
        return Err(Error::Shape(format!(
            "depth of {} and mask of {} pixels for {height}x{width}",
            depth.len(),
            mask.len()
        )));
    }
    let pose = motion.to_matrix()?;
    let rays = pixel_rays(k, height, width);
    let mut sum = nalgebra::Vector3::zeros();
    let mut count = 0usize;
    for i in (0..n).filter(|&i| mask[i] > 0.5) {
        let p = nalgebra::Vector3::new(rays[i], rays[n + i], 1.0) * depth[i];
        sum += pose.transform_point(p) - p;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Invalid("object_motion_vectors on an empty mask".into()));
    }
    let mean = sum / count as f64;
    let norm = mean.norm();
    let direction = if norm > 0.0 { mean / norm } else { mean };
    Ok(MotionVector {
        mean: [mean.x, mean.y, mean.z],
        direction: [direction.x, direction.y, direction.z],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tape;

    #[test]
    fn static_mask_cases() {
        assert_eq!(static_mask(&[0, 0, 0, 0]), vec![1.0; 4]);
        assert_eq!(static_mask(&[1, 0, 1, 0]), vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(static_mask(&[1, 2, 1, 2]), vec![0.0; 4]);
    }

    #[test]
    fn ego_mask_zero_where_any_frame_has_object() {
        assert_eq!(ego_input_mask(&[0; 3], &[0, 1, 0], &[0; 3]), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn validate_rejects_unknown_instance() {
        let f = vec![0u8, 2];
        assert!(InstanceMasks::new(1, 2, [f.clone(), f.clone(), f], vec![0]).is_err());
    }

    #[test]
    fn downsample_and_flip() {
        let m = InstanceMasks::new(2, 4, [vec![1, 0, 0, 2, 0, 0, 0, 0], vec![0; 8], vec![0; 8]], vec![0, 0]).unwrap();
        assert_eq!(m.downsampled().frames[0], vec![1, 0]);
        assert_eq!(m.flipped().frames[0], vec![2, 0, 0, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn motion_vector_translation() {
        let k = Intrinsics::new(2.0, 2.0, 1.0, 1.0).unwrap();
        let depth = vec![3.0; 9];
        let mask = vec![1.0; 9];
        let m = SE3Params::translation_only([0.5, 0.0, 0.0]);
        let v = object_motion_vectors(&m, &depth, &mask, 3, 3, &k).unwrap();
        assert!((v.mean[0] - 0.5).abs() < 1e-12 && v.mean[1].abs() < 1e-12 && v.mean[2].abs() < 1e-12);
        assert!((v.direction[0] - 1.0).abs() < 1e-12);
        let v = object_motion_vectors(&SE3Params::IDENTITY, &depth, &mask, 3, 3, &k).unwrap();
        assert_eq!(v.mean, [0.0; 3]);
        assert!(object_motion_vectors(&m, &depth, &[0.0; 9], 3, 3, &k).is_err());
    }

    #[test]
    fn no_instances_gives_empty_motions() {
        let tape = Tape::new();
        let img = tape.constant(&[3, 2, 2], vec![0.5; 12]);
        let d = tape.constant(&[2, 2], vec![2.0; 4]);
        let k = Intrinsics::new(1.0, 1.0, 0.5, 0.5).unwrap();
        let zero = tape.constant(&[6], vec![0.0; 6]);
        let ego = warp_with(img, d, zero, false, &k).unwrap();
        let net = |_x: Var<'_>| -> Result<(Var<'_>, Var<'_>)> { unreachable!() };
        let masks = InstanceMasks::empty(2, 2);
        assert!(estimate_object_motion(&ego, img, &ego, &masks, &net).unwrap().is_empty());
    }
}
