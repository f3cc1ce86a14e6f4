use nalgebra::Matrix2xX;
use serde::{Deserialize, Serialize};

use super::{init_weak_convex, solve_full, solve_weak, FullSolution, KeypointObservations, SolverConfig, TraceStep, WeakSolution};
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::heatmap::{extract_peak, extract_peak_subpixel, HeatmapStack};
use crate::shape::ShapeBasis;

pub enum ObservationSource<'a> {
    Heatmaps(&'a HeatmapStack),
    Keypoints(&'a KeypointObservations),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateConfig {
    pub solver: SolverConfig,
    /// Keypoints count toward the minimum only above this confidence.
    pub confidence_floor: f64,
    pub min_keypoints: usize,
    pub subpixel_peaks: bool,
    /// Maps raw peak values to weights; identity when absent.
    #[serde(skip)]
    pub confidence_transform: Option<fn(f64) -> f64>,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            solver: SolverConfig::default(),
            confidence_floor: 0.01,
            min_keypoints: 4,
            subpixel_peaks: false,
            confidence_transform: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub observations: KeypointObservations,
    pub weak: WeakSolution,
    pub full: Option<FullSolution>,
}

/// Turns heatmap channels into observations, matched to basis keypoints by
/// name. Keypoints without a channel get zero weight.
pub(crate) fn observations_from_heatmaps(stack: &HeatmapStack, basis: &ShapeBasis, cfg: &EstimateConfig) -> Result<KeypointObservations> {
    let p = basis.num_keypoints();
    let mut w = Matrix2xX::zeros(p);
    let mut d = vec![0.0; p];
    let mut matched = 0;
    for (i, name) in basis.keypoint_names.iter().enumerate() {
        let Some(hm) = stack.maps.iter().find(|m| &m.keypoint_name == name) else {
            continue;
        };
        matched += 1;
        let peak = if cfg.subpixel_peaks {
            extract_peak_subpixel(hm)
        } else {
            extract_peak(hm)
        };
        let (u, v) = stack.crop.to_image(peak.u, peak.v);
        w[(0, i)] = u;
        w[(1, i)] = v;
        d[i] = match cfg.confidence_transform {
            Some(f) => f(peak.confidence),
            None => peak.confidence,
        }
        .max(0.0);
    }
    if matched == 0 && p > 0 {
        return Err(Error::InvalidInput("no heatmap channel matches a basis keypoint name".into()));
    }
    KeypointObservations::new(w, d)
}

/// Heatmap peaks (if needed) → convex init → weak BCD → full BCD when
/// intrinsics are known. The full solve starts from both the weak solution
/// and the mean-shape init and keeps the lower cost.
pub fn estimate_pose(
    source: ObservationSource,
    basis: &ShapeBasis,
    k: Option<&CameraIntrinsics>,
    cfg: &EstimateConfig,
) -> Result<PoseEstimate> {
    let observations = match source {
        ObservationSource::Heatmaps(stack) => observations_from_heatmaps(stack, basis, cfg)?,
        ObservationSource::Keypoints(obs) => obs.clone(),
    };
    observations.validate()?;
    let found = observations.d.iter().filter(|&&d| d > cfg.confidence_floor).count();
    if found < cfg.min_keypoints.max(4) {
        return Err(Error::TooFewKeypoints {
            found,
            needed: cfg.min_keypoints.max(4),
            floor: cfg.confidence_floor,
        });
    }
    let init = init_weak_convex(&observations, basis, &cfg.solver)?;
    let weak = solve_weak(&observations, basis, &cfg.solver, Some(&init))?;
    let full = match k {
        Some(k) => {
            let from_weak = solve_full(&observations, k, basis, &cfg.solver, &weak.pose)?;
            let from_mean = solve_full(&observations, k, basis, &cfg.solver, &init)?;
            Some(if from_mean.cost < from_weak.cost { from_mean } else { from_weak })
        }
        None => None,
    };
    Ok(PoseEstimate { observations, weak, full })
}

/// Objective value at the end of each sweep.
pub(crate) fn sweep_costs(trace: &[TraceStep]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    let mut current = None;
    for step in trace {
        if current != Some(step.sweep) {
            current = Some(step.sweep);
            out.push(step.cost);
        } else if let Some(last) = out.last_mut() {
            *last = step.cost;
        }
    }
    out
}
