use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AnnotateArgs, Outcome, RunConfig};
use crate::annotation::{
    keypoint_refine, object_refine, project_frame, AnnotationConfig, AnnotationFrame, AnnotationMode, ProjectedKeypoint, Refinement,
    SurfaceModel, Visibility,
};
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::heatmap::{synth_heatmap, CropMapping, HeatmapStack};
use crate::io::{load_intrinsics, load_keypoints, parse_tum, read_depth, write_json, TransformJson};
use crate::shape::Keypoints3D;
use crate::synth::frame_id;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointAnnotation {
    pub name: String,
    /// Absent when the keypoint is behind the camera.
    pub u: Option<f64>,
    pub v: Option<f64>,
    pub visibility: Visibility,
    pub refinement: Refinement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub frame_id: String,
    pub keypoints: Vec<KeypointAnnotation>,
    /// Refined fixed-to-camera pose, in object-refinement mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_pose: Option<TransformJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl AnnotationFile {
    fn new(frame_id: &str, kps: &[ProjectedKeypoint]) -> Self {
        AnnotationFile {
            frame_id: frame_id.to_string(),
            keypoints: kps
                .iter()
                .map(|k| KeypointAnnotation {
                    name: k.name.clone(),
                    u: k.pixel.map(|p| p.x),
                    v: k.pixel.map(|p| p.y),
                    visibility: k.visibility,
                    refinement: k.refinement,
                })
                .collect(),
            camera_pose: None,
            warning: None,
        }
    }
}

/// Training heatmaps: unit peaks at visible keypoints, empty channels for
/// the rest.
pub fn annotation_heatmaps(file: &AnnotationFile, k: &CameraIntrinsics, stride: usize, sigma: f64) -> Result<HeatmapStack> {
    let s = stride as f64;
    let crop = CropMapping {
        scale: [s, s],
        offset: [0.0, 0.0],
    };
    let (w, h) = ((k.width as usize).div_ceil(stride), (k.height as usize).div_ceil(stride));
    let maps = file
        .keypoints
        .iter()
        .map(|kp| match (kp.u, kp.v, kp.visibility) {
            (Some(u), Some(v), Visibility::Visible) => {
                let (x, y) = crop.to_heatmap(u, v);
                synth_heatmap(x, y, h, w, sigma, 1.0, kp.name.clone())
            }
            _ => synth_heatmap(0.0, 0.0, h, w, sigma, 0.0, kp.name.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HeatmapStack { maps, crop })
}

fn depth_path(dir: &Path, id: &str) -> Option<PathBuf> {
    ["pfm", "pgm"].iter().map(|e| dir.join(format!("{id}.{e}"))).find(|p| p.is_file())
}

struct Scene<'a> {
    model: &'a SurfaceModel,
    keypoints: &'a Keypoints3D,
    k: CameraIntrinsics,
    mode: AnnotationMode,
    cfg: &'a AnnotationConfig,
}

/// Annotates one frame; `Ok(false)` when the frame succeeded only partly.
fn annotate_frame(scene: &Scene, frame: &AnnotationFrame) -> Result<(AnnotationFile, bool)> {
    match scene.mode {
        AnnotationMode::Project => {
            let kps = project_frame(frame, scene.model, scene.keypoints, scene.cfg);
            Ok((AnnotationFile::new(&frame.frame_id, &kps), true))
        }
        AnnotationMode::RefineObject => {
            let r = object_refine(frame, scene.model, scene.keypoints, scene.cfg);
            let mut file = AnnotationFile::new(&frame.frame_id, &r.keypoints);
            file.camera_pose = Some(TransformJson::from_transform(&r.camera_pose));
            let ok = r.warning.is_none();
            file.warning = r.warning;
            Ok((file, ok))
        }
        AnnotationMode::RefineKeypoint => {
            let kps = keypoint_refine(frame, scene.model, scene.keypoints, scene.cfg)?;
            Ok((AnnotationFile::new(&frame.frame_id, &kps), true))
        }
    }
}

enum FrameResult {
    Done,
    Partial,
    Skipped,
    Failed,
}

pub(super) fn run(args: &AnnotateArgs, cfg: &RunConfig) -> Result<Outcome> {
    let k = load_intrinsics(&args.intrinsics)?;
    let model = SurfaceModel::from_ply(&std::fs::read_to_string(&args.mesh)?)?;
    let keypoints = load_keypoints(&args.keypoints)?;
    let trajectory = parse_tum(&std::fs::read_to_string(&args.trajectory)?)?;
    if trajectory.is_empty() {
        return Err(Error::InvalidInput("trajectory has no poses".into()));
    }
    if args.heatmap_stride == 0 || !(args.heatmap_sigma > 0.0) {
        return Err(Error::InvalidInput("heatmap stride and sigma must be positive".into()));
    }
    let scene = Scene {
        model: &model,
        keypoints: &keypoints,
        k,
        mode: args.mode.into(),
        cfg: &cfg.annotation,
    };

    let results: Vec<FrameResult> = trajectory
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            let id = frame_id(i);
            let Some(path) = depth_path(&args.depth_dir, &id) else {
                log::warn!("frame {id}: no depth image, skipped");
                return FrameResult::Skipped;
            };
            let outcome = read_depth(&path)
                .and_then(|d| AnnotationFrame::new(id.clone(), d, entry.pose, scene.k))
                .and_then(|frame| annotate_frame(&scene, &frame))
                .and_then(|(file, ok)| {
                    write_json(&args.out.join(format!("{id}.json")), &file)?;
                    annotation_heatmaps(&file, &scene.k, args.heatmap_stride, args.heatmap_sigma)?
                        .save(&args.out.join("heatmaps").join(format!("{id}.khm")))?;
                    if let Some(w) = &file.warning {
                        log::warn!("frame {id}: {w}");
                    }
                    Ok(ok)
                });
            match outcome {
                Ok(true) => FrameResult::Done,
                Ok(false) => FrameResult::Partial,
                Err(e) => {
                    log::warn!("frame {id}: {e}");
                    FrameResult::Failed
                }
            }
        })
        .collect();

    let count = |f: fn(&FrameResult) -> bool| results.iter().filter(|r| f(r)).count();
    let done = count(|r| matches!(r, FrameResult::Done));
    let partial = count(|r| matches!(r, FrameResult::Partial));
    let skipped = count(|r| matches!(r, FrameResult::Skipped));
    let failed = count(|r| matches!(r, FrameResult::Failed));
    println!("annotated {done} frames, {partial} unrefined, {skipped} skipped, {failed} failed");
    if skipped == results.len() {
        return Ok(Outcome::FrameFailures);
    }
    Ok(Outcome::from_failures(partial + failed))
}
