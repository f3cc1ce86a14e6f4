//! Pose-error metrics: geodesic rotation error, translation error, and the
//! symmetry-aware maximum surface (MSSD) and projection (MSPD) distances.

use nalgebra::{Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{so3_log, CameraIntrinsics, RigidTransform, Rotation};

/// Upper bound on evaluated vertices; larger models are subsampled by stride.
pub const MAX_MODEL_POINTS: usize = 10_000;

/// Object symmetries, always including the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetrySet {
    transforms: Vec<RigidTransform>,
}

impl SymmetrySet {
    pub fn identity_only() -> Self {
        SymmetrySet {
            transforms: vec![RigidTransform::identity()],
        }
    }

    /// Adds the identity if the list lacks it.
    pub fn new(mut transforms: Vec<RigidTransform>) -> Self {
        let has_identity = transforms
            .iter()
            .any(|t| (t.rotation.matrix() - nalgebra::Matrix3::identity()).amax() < 1e-12 && t.translation.amax() < 1e-12);
        if !has_identity {
            transforms.insert(0, RigidTransform::identity());
        }
        SymmetrySet { transforms }
    }

    pub fn transforms(&self) -> &[RigidTransform] {
        &self.transforms
    }
}

impl Default for SymmetrySet {
    fn default() -> Self {
        SymmetrySet::identity_only()
    }
}

/// Evaluation vertices of an object model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPoints {
    points: Matrix3xX<f64>,
}

impl ModelPoints {
    /// Keeps every `ceil(n / MAX_MODEL_POINTS)`-th vertex.
    pub fn new(points: Matrix3xX<f64>) -> Result<Self> {
        if points.ncols() == 0 {
            return Err(Error::InvalidInput("model has no points".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("model has non-finite points".into()));
        }
        let n = points.ncols();
        let stride = n.div_ceil(MAX_MODEL_POINTS);
        let points = if stride > 1 {
            Matrix3xX::from_columns(&points.column_iter().step_by(stride).map(|c| c.into_owned()).collect::<Vec<_>>())
        } else {
            points
        };
        Ok(ModelPoints { points })
    }

    pub fn points(&self) -> &Matrix3xX<f64> {
        &self.points
    }

    /// Largest pairwise vertex distance.
    pub fn diameter(&self) -> f64 {
        let p = &self.points;
        let mut best = 0.0f64;
        for i in 0..p.ncols() {
            for j in (i + 1)..p.ncols() {
                best = best.max((p.column(i) - p.column(j)).norm_squared());
            }
        }
        best.sqrt()
    }
}

/// Angle of `R1ᵀ R2`, i.e. `‖log(R1ᵀR2)‖_F / √2`, in radians.
pub fn rotation_geodesic(r1: &Rotation, r2: &Rotation) -> f64 {
    so3_log(&r1.transpose().compose(r2)).norm()
}

pub fn translation_error(t1: &Vector3<f64>, t2: &Vector3<f64>) -> f64 {
    (t1 - t2).norm()
}

/// `min_sym max_x ‖est(x) − gt(sym(x))‖`.
pub fn mssd(est: &RigidTransform, gt: &RigidTransform, model: &ModelPoints, sym: &SymmetrySet) -> f64 {
    let est_pts = est.apply_all(model.points());
    sym.transforms()
        .iter()
        .map(|s| {
            let gt_pts = gt.compose(s).apply_all(model.points());
            est_pts
                .column_iter()
                .zip(gt_pts.column_iter())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

fn project_model(
    pose: &RigidTransform,
    model: &ModelPoints,
    k: &CameraIntrinsics,
    which: &'static str,
) -> Result<Vec<nalgebra::Vector2<f64>>> {
    pose.apply_all(model.points())
        .column_iter()
        .map(|c| {
            if c.z > 0.0 {
                Ok(k.project_point(&c.into_owned()))
            } else {
                Err(Error::PoseBehindCamera { pose: which, depth: c.z })
            }
        })
        .collect()
}

/// `min_sym max_x ‖π(est(x)) − π(gt(sym(x)))‖` in pixels.
pub fn mspd(est: &RigidTransform, gt: &RigidTransform, model: &ModelPoints, sym: &SymmetrySet, k: &CameraIntrinsics) -> Result<f64> {
    let est_px = project_model(est, model, k, "estimated")?;
    let mut best = f64::INFINITY;
    for s in sym.transforms() {
        let gt_px = project_model(&gt.compose(s), model, k, "ground-truth")?;
        let worst = est_px.iter().zip(&gt_px).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        best = best.min(worst);
    }
    Ok(best)
}

/// Mean over thresholds of the fraction of errors at or below each threshold.
pub fn recall_at_thresholds(errors: &[f64], thresholds: &[f64]) -> Result<f64> {
    if errors.is_empty() || thresholds.is_empty() {
        return Err(Error::InvalidInput("recall needs nonempty errors and thresholds".into()));
    }
    let n = errors.len() as f64;
    let total: f64 = thresholds
        .iter()
        .map(|t| errors.iter().filter(|e| **e <= *t).count() as f64 / n)
        .sum();
    Ok(total / thresholds.len() as f64)
}

/// Median of finite values; `None` if there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().cloned().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Threshold grids for average recall. The defaults follow the common
/// 5%–50% of diameter (MSSD) and 5–50 px (MSPD) ladders; they are not
/// authoritative and can be overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArThresholds {
    /// Fractions of the object diameter.
    pub mssd_diameter_fractions: Vec<f64>,
    /// Pixels, at the reference image width below.
    pub mspd_pixels: Vec<f64>,
    pub mspd_reference_width: f64,
}

impl Default for ArThresholds {
    fn default() -> Self {
        ArThresholds {
            mssd_diameter_fractions: (1..=10).map(|i| 0.05 * i as f64).collect(),
            mspd_pixels: (1..=10).map(|i| 5.0 * i as f64).collect(),
            mspd_reference_width: 640.0,
        }
    }
}

impl ArThresholds {
    pub fn mssd_thresholds(&self, diameter: f64) -> Vec<f64> {
        self.mssd_diameter_fractions.iter().map(|f| f * diameter).collect()
    }

    pub fn mspd_thresholds(&self, image_width: u32) -> Vec<f64> {
        let r = image_width as f64 / self.mspd_reference_width;
        self.mspd_pixels.iter().map(|p| p * r).collect()
    }
}
