use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Outcome, RunConfig, SolveArgs};
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::heatmap::HeatmapStack;
use crate::io::{file_stem, list_files, load_basis, load_intrinsics, read_json, write_json, ObservationFile};
use crate::shape::ShapeBasis;
use crate::solver::{
    estimate_pose, sweep_costs, Diagnostics, EstimateConfig, FullSolution, KeypointObservations, ObservationSource, PoseEstimate,
    WeakSolution,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStatus {
    Ok,
    /// Solved, but a diagnostic flag is raised.
    Flagged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakPoseJson {
    pub scale: f64,
    /// Rotation lifted from the two fitted rows.
    pub rotation: [[f64; 3]; 3],
    pub translation_px: [f64; 2],
    pub coefficients: Vec<f64>,
    pub cost: f64,
    pub residuals_px: Vec<f64>,
    pub cost_trace: Vec<f64>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullPoseJson {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub coefficients: Vec<f64>,
    pub depths: Vec<f64>,
    pub cost: f64,
    pub residuals_px: Vec<Option<f64>>,
    pub cost_trace: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// One frame of `solve` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub frame_id: String,
    pub status: FrameStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub weak: Option<WeakPoseJson>,
    pub full: Option<FullPoseJson>,
}

impl From<&WeakSolution> for WeakPoseJson {
    fn from(s: &WeakSolution) -> Self {
        let cam = &s.pose.cam;
        WeakPoseJson {
            scale: cam.s,
            rotation: cam.lifted_rotation().to_rows(),
            translation_px: [cam.tbar.x, cam.tbar.y],
            coefficients: s.pose.c.as_slice().to_vec(),
            cost: s.cost,
            residuals_px: s.residuals.clone(),
            cost_trace: sweep_costs(&s.trace),
            diagnostics: s.diagnostics.clone(),
        }
    }
}

impl From<&FullSolution> for FullPoseJson {
    fn from(s: &FullSolution) -> Self {
        let t = &s.pose.pose.translation;
        FullPoseJson {
            rotation: s.pose.pose.rotation.to_rows(),
            translation: [t.x, t.y, t.z],
            coefficients: s.pose.c.as_slice().to_vec(),
            depths: s.pose.z.clone(),
            cost: s.cost,
            residuals_px: s.residuals.clone(),
            cost_trace: sweep_costs(&s.trace),
            diagnostics: s.diagnostics.clone(),
        }
    }
}

fn flagged(d: &Diagnostics) -> bool {
    d.ill_conditioned || d.behind_camera_warning
}

impl PoseFile {
    pub fn from_estimate(frame_id: &str, est: &PoseEstimate) -> Self {
        let mut status = if flagged(&est.weak.diagnostics) {
            FrameStatus::Flagged
        } else {
            FrameStatus::Ok
        };
        if est.full.as_ref().is_some_and(|f| flagged(&f.diagnostics)) {
            status = FrameStatus::Flagged;
        }
        PoseFile {
            frame_id: frame_id.to_string(),
            status,
            error: None,
            weak: Some((&est.weak).into()),
            full: est.full.as_ref().map(Into::into),
        }
    }

    pub fn failed(frame_id: &str, err: &Error) -> Self {
        PoseFile {
            frame_id: frame_id.to_string(),
            status: FrameStatus::Failed,
            error: Some(err.to_string()),
            weak: None,
            full: None,
        }
    }
}

enum Input {
    Observations(PathBuf),
    Heatmaps(PathBuf),
}

fn load_frame(input: &Input, basis: &ShapeBasis, cfg: &EstimateConfig) -> Result<(String, KeypointObservations)> {
    match input {
        Input::Observations(p) => {
            let f: ObservationFile = read_json(p)?;
            let obs = f.to_observations(&basis.keypoint_names)?;
            Ok((f.frame_id, obs))
        }
        Input::Heatmaps(p) => {
            let stack = HeatmapStack::load(p)?;
            let obs = crate::solver::observations_from_heatmaps(&stack, basis, cfg)?;
            Ok((file_stem(p), obs))
        }
    }
}

fn solve_frame(
    input: &Input,
    basis: &ShapeBasis,
    k: Option<&CameraIntrinsics>,
    cfg: &EstimateConfig,
    uniform: bool,
) -> std::result::Result<(String, PoseEstimate), (String, Error)> {
    let stem = match input {
        Input::Observations(p) | Input::Heatmaps(p) => file_stem(p),
    };
    let (id, obs) = load_frame(input, basis, cfg).map_err(|e| (stem, e))?;
    let obs = if uniform { obs.uniform() } else { obs };
    estimate_pose(ObservationSource::Keypoints(&obs), basis, k, cfg)
        .map(|est| (id.clone(), est))
        .map_err(|e| (id, e))
}

pub(super) fn run(args: &SolveArgs, cfg: &RunConfig) -> Result<Outcome> {
    let basis = load_basis(&args.basis)?;
    let k = args.intrinsics.as_deref().map(load_intrinsics).transpose()?;
    let inputs: Vec<Input> = match (&args.observations, &args.heatmaps) {
        (Some(dir), _) => list_files(dir, "json")?.into_iter().map(Input::Observations).collect(),
        (None, Some(dir)) => list_files(dir, "khm")?.into_iter().map(Input::Heatmaps).collect(),
        (None, None) => return Err(Error::InvalidInput("need --observations or --heatmaps".into())),
    };
    if inputs.is_empty() {
        return Err(Error::InvalidInput("no input frames found".into()));
    }
    std::fs::create_dir_all(&args.out)?;

    let statuses: Vec<FrameStatus> = inputs
        .par_iter()
        .map(|input| {
            let file = match solve_frame(input, &basis, k.as_ref(), &cfg.solve, args.uniform_weights) {
                Ok((id, est)) => PoseFile::from_estimate(&id, &est),
                Err((id, e)) => {
                    log::warn!("frame {id}: {e}");
                    PoseFile::failed(&id, &e)
                }
            };
            let path = args.out.join(format!("{}.json", file.frame_id));
            match write_json(&path, &file) {
                Ok(()) => file.status,
                Err(e) => {
                    log::error!("{}: {e}", path.display());
                    FrameStatus::Failed
                }
            }
        })
        .collect();

    let failed = statuses.iter().filter(|s| **s != FrameStatus::Ok).count();
    println!("solved {} of {} frames", statuses.len() - failed, statuses.len());
    Ok(Outcome::from_failures(failed))
}
