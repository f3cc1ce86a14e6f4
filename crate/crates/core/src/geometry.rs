//! Rotation and rigid-transform algebra, camera models and projection.
//!
//! Point sets are stored column-wise: a `Matrix3xX` holds one 3D point per
//! column and a `Matrix2xX` one pixel per column.

use nalgebra::{Matrix2x3, Matrix2xX, Matrix3, Matrix3xX, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Angles closer than this to π take the symmetric-part branch of [`so3_log`].
pub const NEAR_PI_TOL: f64 = 1e-6;

/// A proper rotation matrix (orthonormal, determinant +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix after checking orthonormality and determinant within `1e-9`.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if !m.iter().all(|v| v.is_finite()) || ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "not a rotation: orthogonality error {ortho:.3e}, det {det}"
            )));
        }
        Ok(Rotation(m))
    }

    /// Projects an arbitrary 3x3 matrix onto the nearest rotation (SVD with
    /// determinant correction).
    pub fn nearest(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("u requested");
        let v_t = svd.v_t.expect("v requested");
        let d = (u * v_t).determinant().signum();
        let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
        Rotation(u * correction * v_t)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// First two rows, the weak-perspective part of the rotation.
    pub fn top_rows(&self) -> Matrix2x3<f64> {
        self.0.fixed_rows::<2>(0).into_owned()
    }

    /// Completes a row-orthonormal 2x3 matrix to a rotation; the third row
    /// is the cross product of the first two.
    pub fn lift(rbar: &Matrix2x3<f64>) -> Rotation {
        let r1 = rbar.row(0).transpose();
        let r2 = rbar.row(1).transpose();
        let r3 = r1.cross(&r2);
        Rotation(Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r3.transpose()]))
    }

    pub fn from_quaternion(qx: f64, qy: f64, qz: f64, qw: f64) -> Result<Self> {
        let q = nalgebra::Quaternion::new(qw, qx, qy, qz);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::InvalidInput(format!("degenerate quaternion norm {n}")));
        }
        Ok(Rotation(UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()))
    }

    /// Returns `(qx, qy, qz, qw)` with `qw >= 0`.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.0);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        [q.i, q.j, q.k, q.w]
    }

    pub fn to_rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    pub fn from_rows(rows: &[[f64; 3]; 3]) -> Result<Self> {
        let m = Matrix3::from_fn(|r, c| rows[r][c]);
        Rotation::from_matrix(m)
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::identity()
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        RigidTransform { rotation, translation }
    }

    pub fn identity() -> Self {
        RigidTransform::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn apply_all(&self, pts: &Matrix3xX<f64>) -> Matrix3xX<f64> {
        let mut out = self.rotation.matrix() * pts;
        for mut col in out.column_iter_mut() {
            col += self.translation;
        }
        out
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -rt.rotate(&self.translation),
        }
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        RigidTransform::identity()
    }
}

/// Pinhole intrinsics. Pixel `(u, v)` has its center at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Pixel coordinates of a camera-frame point. No depth check.
    pub fn project_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth)
    }

    /// Integer pixel containing `(u, v)`, if it lies on the image.
    pub fn pixel_index(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (x, y) = (u.round(), v.round());
        if x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64 {
            Some((x as usize, y as usize))
        } else {
            None
        }
    }
}

/// Weak-perspective camera `u = s * rbar * X + tbar`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakCamera {
    pub s: f64,
    pub rbar: Matrix2x3<f64>,
    pub tbar: Vector2<f64>,
}

impl WeakCamera {
    pub fn new(s: f64, rbar: Matrix2x3<f64>, tbar: Vector2<f64>) -> Result<Self> {
        let gram = rbar * rbar.transpose();
        let err = (gram - nalgebra::Matrix2::identity()).abs().max();
        if !(s > 0.0) || err > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "invalid weak camera: s = {s}, row orthonormality error {err:.3e}"
            )));
        }
        Ok(WeakCamera { s, rbar, tbar })
    }

    pub fn from_rotation(s: f64, rotation: &Rotation, tbar: Vector2<f64>) -> Result<Self> {
        WeakCamera::new(s, rotation.top_rows(), tbar)
    }

    /// The full rotation whose top rows are `rbar`.
    pub fn lifted_rotation(&self) -> Rotation {
        Rotation::lift(&self.rbar)
    }
}

fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues exponential map from axis-angle to rotation.
pub fn so3_exp(w: &Vector3<f64>) -> Rotation {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let (a, b) = if theta < 1e-4 {
        // Taylor expansions of sin(t)/t and (1 - cos t)/t^2
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Logarithm map: axis-angle vector with angle in `[0, π]`.
///
/// Within [`NEAR_PI_TOL`] of π the axis is read from the symmetric part using
/// the largest diagonal element of `(R + I) / 2`. At exactly π the sign is
/// chosen so the first nonzero axis component is positive.
pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    let m = r.matrix();
    let skew = vee(&(m - m.transpose())) * 0.5;
    let sin_t = skew.norm();
    let cos_t = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_t.atan2(cos_t);

    if theta < 1e-8 {
        // sin(t) ~ t; first-order correction keeps round trips tight.
        return skew * (1.0 + theta * theta / 6.0);
    }
    if std::f64::consts::PI - theta > NEAR_PI_TOL {
        return skew * (theta / sin_t);
    }

    let sym = (m + Matrix3::identity()) * 0.5;
    let mut best = 0;
    for i in 1..3 {
        if sym[(i, i)] > sym[(best, best)] {
            best = i;
        }
    }
    // (R + R^T)/2 - cos(t) I = (1 - cos t) a a^T
    let b = (m + m.transpose()) * 0.5 - Matrix3::identity() * cos_t;
    let mut axis = b.column(best).into_owned() / b[(best, best)].max(f64::MIN_POSITIVE).sqrt();
    axis /= axis.norm();
    if sin_t > 1e-12 {
        if axis.dot(&skew) < 0.0 {
            axis = -axis;
        }
    } else if let Some(first) = axis.iter().find(|c| c.abs() > 1e-12) {
        if *first < 0.0 {
            axis = -axis;
        }
    }
    axis * theta
}

/// Weighted orthogonal Procrustes: `argmin_R Σ w_i ‖R a_i − b_i‖²` over
/// proper rotations. Callers remove centroids when translation is free.
pub fn orthogonal_procrustes(a: &Matrix3xX<f64>, b: &Matrix3xX<f64>, w: &[f64]) -> Result<Rotation> {
    let p = a.ncols();
    if b.ncols() != p || w.len() != p {
        return Err(Error::Dimension(format!(
            "procrustes: {} source, {} target, {} weights",
            p,
            b.ncols(),
            w.len()
        )));
    }
    if p < 3 {
        return Err(Error::InvalidInput(format!("procrustes needs at least 3 points, got {p}")));
    }
    if w.iter().any(|&wi| !(wi >= 0.0)) {
        return Err(Error::InvalidInput("procrustes weights must be nonnegative".into()));
    }
    let mut h = Matrix3::zeros();
    for (i, &wi) in w.iter().enumerate() {
        if wi > 0.0 {
            h += b.column(i) * a.column(i).transpose() * wi;
        }
    }
    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::Degenerate(format!(
            "procrustes cross-covariance has rank < 2 (singular values {:.3e}, {:.3e}, {:.3e})",
            sv[0], sv[1], sv[2]
        )));
    }
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v requested");
    let d = (u * v_t).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    Ok(Rotation(u * correction * v_t))
}

/// `s · rbar · S + tbar 1ᵀ`.
pub fn project_weak(shape: &Matrix3xX<f64>, cam: &WeakCamera) -> Matrix2xX<f64> {
    let mut out = cam.rbar * shape * cam.s;
    for mut col in out.column_iter_mut() {
        col += cam.tbar;
    }
    out
}

/// Pinhole projection of object points through `pose` into pixels.
pub fn project_full(shape: &Matrix3xX<f64>, pose: &RigidTransform, k: &CameraIntrinsics) -> Result<Matrix2xX<f64>> {
    let cam = pose.apply_all(shape);
    let mut out = Matrix2xX::zeros(cam.ncols());
    for (i, p) in cam.column_iter().enumerate() {
        if !(p.z > 0.0) {
            return Err(Error::BehindCamera { column: i, depth: p.z });
        }
        out.set_column(i, &k.project_point(&p.into_owned()));
    }
    Ok(out)
}

/// Normalized homogeneous coordinates `((u−cx)/fx, (v−cy)/fy, 1)`.
pub fn normalize_pixels(w: &Matrix2xX<f64>, k: &CameraIntrinsics) -> Matrix3xX<f64> {
    Matrix3xX::from_fn(w.ncols(), |r, c| match r {
        0 => (w[(0, c)] - k.cx) / k.fx,
        1 => (w[(1, c)] - k.cy) / k.fy,
        _ => 1.0,
    })
}
