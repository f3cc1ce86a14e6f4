//! Confidence-weighted, Tikhonov-regularized fitting of the deformable shape
//! model to 2D keypoints under weak- and full-perspective cameras.
//!
//! Both solvers minimize `½‖ξ D^½‖²_F + (λ/2)‖c‖²` by block coordinate
//! descent. Every block update is accepted only if it does not increase the
//! objective, so the recorded trace is non-increasing.

mod estimate;
mod full;
pub(crate) mod linalg;
mod weak;

pub use estimate::{estimate_pose, EstimateConfig, ObservationSource, PoseEstimate};
pub(crate) use estimate::{observations_from_heatmaps, sweep_costs};
pub use full::{cost_full, initial_full_pose, solve_full, FullSolution};
pub use weak::{cost_weak, init_weak_convex, solve_weak, weak_rotation_gradient, WeakSolution};

use nalgebra::{DVector, Matrix2xX};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, WeakCamera};
use crate::shape::ShapeCoefficients;

/// 2D keypoints with per-keypoint confidences (the diagonal of `D`).
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointObservations {
    pub w: Matrix2xX<f64>,
    pub d: Vec<f64>,
}

impl KeypointObservations {
    pub fn new(w: Matrix2xX<f64>, d: Vec<f64>) -> Result<Self> {
        let obs = KeypointObservations { w, d };
        obs.validate()?;
        Ok(obs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d.len() != self.w.ncols() {
            return Err(Error::Dimension(format!(
                "{} confidences for {} keypoints",
                self.d.len(),
                self.w.ncols()
            )));
        }
        if self.d.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidInput("confidences must be finite and nonnegative".into()));
        }
        // zero-weight columns may hold anything finite; they never enter the cost
        for (i, c) in self.w.column_iter().enumerate() {
            if self.d[i] > 0.0 && !(c[0].is_finite() && c[1].is_finite()) {
                return Err(Error::InvalidInput(format!("keypoint {i} has non-finite pixels")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    pub fn weighted_count(&self) -> usize {
        self.d.iter().filter(|&&d| d > 0.0).count()
    }

    /// Same pixels with every detected keypoint at confidence one; missing
    /// keypoints stay at zero.
    pub fn uniform(&self) -> Self {
        KeypointObservations {
            w: self.w.clone(),
            d: self.d.iter().map(|&d| if d > 0.0 { 1.0 } else { 0.0 }).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakPose {
    pub cam: WeakCamera,
    pub c: ShapeCoefficients,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullPose {
    pub pose: RigidTransform,
    pub c: ShapeCoefficients,
    pub z: Vec<f64>,
}

/// The last iterate a solver held before it gave up.
#[derive(Debug, Clone, PartialEq)]
pub enum PoseSnapshot {
    Weak(WeakPose),
    Full(FullPose),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Tikhonov weight on the shape coefficients.
    pub lambda: f64,
    /// Spectral-norm weight of the convex initializer; 0 gives plain least squares.
    pub gamma: f64,
    pub max_iters: usize,
    /// Stop when a sweep lowers the cost by less than this fraction.
    pub rel_tol: f64,
    pub line_search_shrink: f64,
    pub line_search_max_steps: usize,
    /// Condition number of the weighted structure matrix above which the
    /// keypoint configuration is flagged as (nearly) coplanar.
    pub coplanarity_tol: f64,
    /// Condition number above which the shape normal equations fall back to
    /// a truncated eigen-solve.
    pub shape_cond_limit: f64,
    /// Minimum keypoint depth in meters for the full-perspective solver.
    pub z_min: f64,
    pub prox_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda: 1.0,
            gamma: 0.0,
            max_iters: 1000,
            rel_tol: 1e-9,
            line_search_shrink: 0.5,
            line_search_max_steps: 60,
            coplanarity_tol: 1e8,
            shape_cond_limit: 1e10,
            z_min: 0.01,
            prox_iters: 200,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda >= 0.0
            && self.gamma >= 0.0
            && self.max_iters >= 1
            && self.rel_tol > 0.0
            && self.line_search_shrink > 0.0
            && self.line_search_shrink < 1.0
            && self.z_min > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid solver config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Init,
    Scale,
    Translation,
    Shape,
    Rotation,
    Depth,
    /// Joint Gauss-Newton step on pose and shape.
    Joint,
}

/// Objective value after one block update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub sweep: usize,
    pub block: Block,
    pub cost: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Condition number of the weighted, centered structure matrix `S D Sᵀ`.
    pub structure_condition: f64,
    /// Set when `structure_condition` exceeds the coplanarity tolerance.
    pub ill_conditioned: bool,
    /// Largest condition number seen in the shape normal equations.
    pub shape_condition: f64,
    /// Set when the shape update needed the truncated solve.
    pub shape_truncated: bool,
    pub converged: bool,
    pub sweeps: usize,
    /// Full perspective only: some depth sat on the clamp for more than half
    /// the sweeps.
    pub behind_camera_warning: bool,
}

/// Returns true if every step in the trace is no higher than its predecessor.
pub fn trace_is_monotone(trace: &[TraceStep]) -> bool {
    trace.windows(2).all(|w| w[1].cost <= w[0].cost)
}

pub(crate) fn weight_sum(d: &[f64]) -> f64 {
    d.iter().sum()
}

pub(crate) fn coeffs(v: DVector<f64>) -> ShapeCoefficients {
    ShapeCoefficients(v)
}
