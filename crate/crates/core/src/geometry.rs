//! Rigid transforms, pinhole intrinsics and the differentiable
//! unproject / transform / project chain.
//!
//! Camera frame: +x right, +y down, +z forward. Pixel coordinates are
//! zero-indexed with integer pixel centres.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::diff::{concat, stack_scalars, Tape, Var};
use crate::error::{Error, Result};

/// Orthonormality and bottom-row tolerance for [`Pose4x4`].
pub const POSE_TOL: f64 = 1e-9;

/// Six-parameter rigid transform `(t_x, t_y, t_z, r_x, r_y, r_z)`.
///
/// Rotation is `R = R_z(r_z) R_y(r_y) R_x(r_x)` with angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SE3Params {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
}

impl SE3Params {
    pub const IDENTITY: SE3Params = SE3Params {
        translation: [0.0; 3],
        rotation: [0.0; 3],
    };

    pub fn new(translation: [f64; 3], rotation: [f64; 3]) -> Self {
        Self {
            translation,
            rotation,
        }
    }

    pub fn translation_only(t: [f64; 3]) -> Self {
        Self::new(t, [0.0; 3])
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 6 {
            return Err(Error::Shape(format!("SE3 needs 6 values, got {}", v.len())));
        }
        Ok(Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]))
    }

    pub fn to_array(&self) -> [f64; 6] {
        let [tx, ty, tz] = self.translation;
        let [rx, ry, rz] = self.rotation;
        [tx, ty, tz, rx, ry, rz]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn to_matrix(&self) -> Result<Pose4x4> {
        se3_to_matrix(self)
    }
}

pub fn rotation_matrix(rx: f64, ry: f64, rz: f64) -> Matrix3<f64> {
    let (sx, cx) = rx.sin_cos();
    let (sy, cy) = ry.sin_cos();
    let (sz, cz) = rz.sin_cos();
    let rot_x = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let rot_y = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rot_z = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    rot_z * rot_y * rot_x
}

pub fn se3_to_matrix(p: &SE3Params) -> Result<Pose4x4> {
    if !p.is_finite() {
        return Err(Error::Invalid(format!("non-finite SE3 parameters {p:?}")));
    }
    let [rx, ry, rz] = p.rotation;
    let r = rotation_matrix(rx, ry, rz);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3)
        .copy_from(&Vector3::from(p.translation));
    Ok(Pose4x4(m))
}

/// Homogeneous rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose4x4(Matrix4<f64>);

impl Pose4x4 {
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    /// Validates rotation orthonormality, `det = +1` and the bottom row.
    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        let pose = Self(m);
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.0;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("pose has non-finite entries".into()));
        }
        let r = self.rotation();
        let ortho = (r.transpose() * r - Matrix3::identity()).amax();
        let det = r.determinant();
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)] - 1.0];
        if ortho > POSE_TOL || (det - 1.0).abs() > POSE_TOL || bottom.iter().any(|v| v.abs() > POSE_TOL)
        {
            return Err(Error::Invalid(format!(
                "not a rigid transform (orthonormality error {ortho:e}, det {det})"
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Pose4x4) -> Pose4x4 {
        Pose4x4(self.0 * other.0)
    }

    pub fn transform_point(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Recovers Z-Y-X Euler parameters; exact for `|r_y| < pi/2`.
    pub fn to_params(&self) -> SE3Params {
        let r = self.rotation();
        let ry = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
        let rx = r[(2, 1)].atan2(r[(2, 2)]);
        let rz = r[(1, 0)].atan2(r[(0, 0)]);
        let t = self.translation();
        SE3Params::new([t.x, t.y, t.z], [rx, ry, rz])
    }
}

/// Rigid-transform inverse `R' = R^T`, `t' = -R^T t`.
pub fn invert(p: &Pose4x4) -> Result<Pose4x4> {
    p.validate()?;
    let rt = p.rotation().transpose();
    let t = -(rt * p.translation());
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    Ok(Pose4x4(m))
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite())
            || !(cx.is_finite() && cy.is_finite())
        {
            return Err(Error::Invalid(format!(
                "intrinsics need positive finite focal lengths, got fx={fx} fy={fy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Intrinsics after `level` rounds of 2x average pooling. With integer
    /// pixel centres a coarse pixel `u` covers fine pixels `2u` and `2u+1`,
    /// so `c' = (c - 0.5) / 2`.
    pub fn downscaled(&self, level: u32) -> Self {
        let mut k = *self;
        for _ in 0..level {
            k = Self {
                fx: k.fx / 2.0,
                fy: k.fy / 2.0,
                cx: (k.cx - 0.5) / 2.0,
                cy: (k.cy - 0.5) / 2.0,
            };
        }
        k
    }

    /// Intrinsics of the horizontally mirrored image.
    pub fn flipped(&self, width: usize) -> Self {
        Self {
            cx: (width as f64 - 1.0) - self.cx,
            ..*self
        }
    }

    /// Row-major 3x3 matrix as one text line of nine numbers.
    pub fn to_line(&self) -> String {
        let m = self.matrix();
        (0..3)
            .flat_map(|r| (0..3).map(move |c| (r, c)))
            .map(|(r, c)| format!("{}", m[(r, c)]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Invalid(format!("intrinsics line: {e}")))?;
        if v.len() != 9 {
            return Err(Error::Invalid(format!(
                "intrinsics line needs 9 numbers, got {}",
                v.len()
            )));
        }
        let structural = [v[1], v[3], v[6], v[7], v[8] - 1.0];
        if structural.iter().any(|x| x.abs() > 1e-12) {
            return Err(Error::Invalid(
                "intrinsics matrix must be upper triangular with zero skew and unit corner".into(),
            ));
        }
        Self::new(v[0], v[4], v[2], v[5])
    }
}

/// Rotation matrix `(3,3)` from a `(6,)` parameter var.
pub fn rotation_var<'t>(params: Var<'t>) -> Var<'t> {
    let (rx, ry, rz) = (params.index(3), params.index(4), params.index(5));
    let (sx, cx) = (rx.sin(), rx.cos());
    let (sy, cy) = (ry.sin(), ry.cos());
    let (sz, cz) = (rz.sin(), rz.cos());
    let entries = [
        cz * cy,
        cz * sy * sx - sz * cx,
        cz * sy * cx + sz * sx,
        sz * cy,
        sz * sy * sx + cz * cx,
        sz * sy * cx - cz * sx,
        -sy,
        cy * sx,
        cy * cx,
    ];
    stack_scalars(&entries).reshape(&[3, 3])
}

/// Applies the transform encoded by `params` (or its inverse) to `(3,H,W)`
/// camera points.
pub fn transform_points<'t>(points: Var<'t>, params: Var<'t>, inverse: bool) -> Var<'t> {
    let shape = points.shape();
    assert_eq!(shape[0], 3, "points must have 3 leading channels, got {shape:?}");
    let n: usize = shape[1..].iter().product();
    let flat = points.reshape(&[3, n]);
    let rot = rotation_var(params);
    let t = params.narrow(0, 0, 3).reshape(&[3, 1]);
    let out = if inverse {
        rot.transpose().matmul(flat - t)
    } else {
        rot.matmul(flat) + t
    };
    out.reshape(&shape)
}

/// Constant `(3,H,W)` field of rays `K^-1 [x, y, 1]^T`.
pub fn pixel_rays(k: &Intrinsics, h: usize, w: usize) -> Vec<f64> {
    let mut rays = vec![1.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            rays[i] = (x as f64 - k.cx) / k.fx;
            rays[h * w + i] = (y as f64 - k.cy) / k.fy;
        }
    }
    rays
}

/// Pixel grid `(2,H,W)` holding `x` then `y` coordinates.
pub fn pixel_grid(h: usize, w: usize) -> Vec<f64> {
    let mut g = vec![0.0; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            g[y * w + x] = x as f64;
            g[h * w + y * w + x] = y as f64;
        }
    }
    g
}

/// Lifts a `(H,W)` depth map to `(3,H,W)` camera points.
pub fn unproject<'t>(depth: Var<'t>, k: &Intrinsics) -> Result<Var<'t>> {
    let shape = depth.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("depth must be (H,W), got {shape:?}")));
    }
    if let Some(bad) = depth.value().iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::Invalid(format!("unproject needs positive depth, found {bad}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let tape: &'t Tape = depth.tape();
    let rays = tape.constant(&[3, h, w], pixel_rays(k, h, w));
    Ok(rays * depth.reshape(&[1, h, w]))
}

/// Projects `(3,H,W)` camera points to `(2,H,W)` pixel coordinates.
/// Depths near zero go through the division guard; callers mask them.
pub fn project<'t>(points: Var<'t>, k: &Intrinsics) -> Var<'t> {
    let shape = points.shape();
    assert_eq!(shape[0], 3, "points must have 3 leading channels, got {shape:?}");
    let x = points.narrow(0, 0, 1);
    let y = points.narrow(0, 1, 1);
    let z = points.narrow(0, 2, 1);
    let u = (x / z).scale(k.fx).offset(k.cx);
    let v = (y / z).scale(k.fy).offset(k.cy);
    concat(&[u, v], 0).expect("matching shapes")
}
