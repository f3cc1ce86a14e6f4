//! Keypoint projection, visibility, and the keypoint- and object-level
//! refinements.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::cloud::{back_project, back_project_with_normals, crop_by_keypoint_volume, crop_indices, keypoint_diagonal, DepthCloud};
use super::depth::{render_depth, DepthImage};
use super::fpfh::{descriptor_distance, FpfhEstimator, FPFH_LEN};
use super::icp::{icp_point_to_plane, IcpConfig, IcpResult};
use super::surface::SurfaceModel;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidTransform};
use crate::shape::Keypoints3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Visible,
    Occluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refinement {
    None,
    JumpEdge,
    FeatureMatch,
    Icp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedKeypoint {
    pub name: String,
    /// `None` when the keypoint lies behind the camera.
    pub pixel: Option<Vector2<f64>>,
    pub cam_point: Vector3<f64>,
    /// Surface normal in the camera frame, when the keypoint has one.
    pub normal: Option<Vector3<f64>>,
    pub visibility: Visibility,
    pub refinement: Refinement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnotationMode {
    Project,
    RefineObject,
    RefineKeypoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotationConfig {
    pub tau: f64,
    pub depth_slack: f64,
    pub jump_threshold: f64,
    /// Side of the square pixel window searched after a jump edge.
    pub jump_window: usize,
    pub search_radius_px: f64,
    pub w_euclid: f64,
    pub w_feat: f64,
    pub fpfh_radius: f64,
    /// Nearest points kept per FPFH neighborhood.
    pub fpfh_max_neighbors: usize,
    /// Real-depth crop grows by `dilation_fraction * diagonal + dilation_offset`.
    pub dilation_fraction: f64,
    pub dilation_offset: f64,
    /// Depth gap that separates neighbors during normal estimation.
    pub normal_edge_gap: f64,
    pub icp: IcpConfig,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        AnnotationConfig {
            tau: -0.15,
            depth_slack: 0.02,
            jump_threshold: 0.05,
            jump_window: 11,
            search_radius_px: 15.0,
            w_euclid: 0.7,
            w_feat: 0.3,
            fpfh_radius: 0.05,
            fpfh_max_neighbors: 100,
            dilation_fraction: 0.1,
            dilation_offset: 0.05,
            normal_edge_gap: 0.05,
            icp: IcpConfig::default(),
        }
    }
}

impl AnnotationConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            self.depth_slack,
            self.jump_threshold,
            self.search_radius_px,
            self.w_euclid,
            self.w_feat,
            self.dilation_fraction,
            self.dilation_offset,
            self.normal_edge_gap,
        ];
        if !self.tau.is_finite()
            || nonneg.iter().any(|v| !(*v >= 0.0) || !v.is_finite())
            || !(self.fpfh_radius > 0.0)
            || self.jump_window == 0
            || self.fpfh_max_neighbors == 0
        {
            return Err(Error::InvalidInput(format!("bad annotation config {self:?}")));
        }
        self.icp.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationFrame {
    pub frame_id: String,
    pub real_depth: DepthImage,
    /// Maps fixed-frame points into the camera frame.
    pub camera_pose: RigidTransform,
    pub k: CameraIntrinsics,
}

impl AnnotationFrame {
    pub fn new(frame_id: impl Into<String>, real_depth: DepthImage, camera_pose: RigidTransform, k: CameraIntrinsics) -> Result<Self> {
        k.validate()?;
        if !real_depth.matches(&k) {
            return Err(Error::Dimension(format!(
                "depth image is {}x{} but intrinsics say {}x{}",
                real_depth.width, real_depth.height, k.width, k.height
            )));
        }
        Ok(AnnotationFrame {
            frame_id: frame_id.into(),
            real_depth,
            camera_pose,
            k,
        })
    }
}

/// Moves keypoints into the camera frame and projects them; keypoints behind
/// the camera or off the image are marked occluded.
pub fn project_keypoints(kps: &Keypoints3D, camera_pose: &RigidTransform, k: &CameraIntrinsics) -> Vec<ProjectedKeypoint> {
    (0..kps.len())
        .map(|i| {
            let cam_point = camera_pose.apply(&kps.points.column(i).into_owned());
            let normal = kps.normal(i).map(|n| camera_pose.rotation.rotate(&n));
            let pixel = (cam_point.z > 0.0).then(|| k.project_point(&cam_point));
            let on_image = pixel.is_some_and(|p| k.pixel_index(p.x, p.y).is_some());
            ProjectedKeypoint {
                name: kps.names[i].clone(),
                pixel,
                cam_point,
                normal,
                visibility: if on_image { Visibility::Visible } else { Visibility::Occluded },
                refinement: Refinement::None,
            }
        })
        .collect()
}

/// Z-buffer test against the generated depth plus the normal test
/// `v · n > tau`. Missing generated depth counts as occluded.
pub fn occlusion_test(
    kp: &ProjectedKeypoint,
    gen_depth: &DepthImage,
    normal: Option<&Vector3<f64>>,
    view: &Vector3<f64>,
    tau: f64,
    depth_slack: f64,
) -> Visibility {
    let Some(px) = kp.pixel else {
        return Visibility::Occluded;
    };
    let Some(gen) = gen_depth.at(px.x, px.y) else {
        return Visibility::Occluded;
    };
    if kp.cam_point.z > gen + depth_slack {
        return Visibility::Occluded;
    }
    if let Some(n) = normal {
        if view.dot(n) > tau {
            return Visibility::Occluded;
        }
    }
    Visibility::Visible
}

fn classify(kps: &mut [ProjectedKeypoint], gen_depth: &DepthImage, cfg: &AnnotationConfig) {
    for kp in kps.iter_mut() {
        if kp.visibility == Visibility::Occluded {
            continue;
        }
        let view = kp.cam_point.normalize();
        kp.visibility = occlusion_test(kp, gen_depth, kp.normal.as_ref(), &view, cfg.tau, cfg.depth_slack);
    }
}

/// If the generated depth is shallower than the measured one by more than
/// `jump_threshold`, moves the keypoint to the projection of the measured
/// point (within the window) closest to its 3D position.
pub fn jump_edge_adjust(
    kp: &ProjectedKeypoint,
    real_depth: &DepthImage,
    gen_depth: &DepthImage,
    k: &CameraIntrinsics,
    jump_threshold: f64,
    window: usize,
) -> ProjectedKeypoint {
    let mut out = kp.clone();
    if kp.visibility != Visibility::Visible {
        return out;
    }
    let Some(px) = kp.pixel else {
        return out;
    };
    let (Some(gen), Some(real)) = (gen_depth.at(px.x, px.y), real_depth.at(px.x, px.y)) else {
        return out;
    };
    if !(gen < real - jump_threshold) {
        return out;
    }
    let Some((cx, cy)) = real_depth.pixel_of(px.x, px.y) else {
        return out;
    };
    let half = window / 2;
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for y in cy.saturating_sub(half)..=(cy + half).min(real_depth.height - 1) {
        for x in cx.saturating_sub(half)..=(cx + half).min(real_depth.width - 1) {
            let d = real_depth.get(x, y);
            if d <= 0.0 {
                continue;
            }
            let q = k.unproject(x as f64, y as f64, d);
            let dist = (q - kp.cam_point).norm();
            if best.is_none_or(|(b, _)| dist < b) {
                best = Some((dist, q));
            }
        }
    }
    if let Some((_, q)) = best {
        out.pixel = Some(k.project_point(&q));
        out.cam_point = q;
        out.refinement = Refinement::JumpEdge;
    }
    out
}

/// Depth clouds of one frame with lazily evaluated descriptors.
pub struct FeatureSource<'a> {
    pub depth_cloud: &'a DepthCloud,
    pub estimator: FpfhEstimator<'a>,
}

impl<'a> FeatureSource<'a> {
    pub fn new(depth_cloud: &'a DepthCloud, radius: f64, max_neighbors: usize) -> Result<Self> {
        Ok(FeatureSource {
            depth_cloud,
            estimator: FpfhEstimator::new(&depth_cloud.cloud, radius)?.with_max_neighbors(max_neighbors),
        })
    }
}

/// Scores measured points within `search_radius_px` of the keypoint by
/// `w_euclid * d_3d / max d_3d + w_feat * d_feat / max d_feat` and moves the
/// keypoint to the best one.
pub fn feature_match_refine(
    kp: &ProjectedKeypoint,
    gen: &mut FeatureSource,
    real: &mut FeatureSource,
    k: &CameraIntrinsics,
    cfg: &AnnotationConfig,
) -> ProjectedKeypoint {
    let mut out = kp.clone();
    if kp.visibility != Visibility::Visible || kp.refinement == Refinement::JumpEdge {
        return out;
    }
    let Some(px) = kp.pixel else {
        return out;
    };
    let reference = gen
        .estimator
        .nearest(&kp.cam_point)
        .and_then(|(i, _)| gen.estimator.descriptor(i))
        .unwrap_or([0.0; FPFH_LEN]);

    let r = cfg.search_radius_px;
    let width = real.depth_cloud.width;
    let height = real.depth_cloud.index.len() / width.max(1);
    let x0 = (px.x - r).ceil().max(0.0) as usize;
    let y0 = (px.y - r).ceil().max(0.0) as usize;
    let x1 = ((px.x + r).floor().max(-1.0) + 1.0).min(width as f64) as usize;
    let y1 = ((px.y + r).floor().max(-1.0) + 1.0).min(height as f64) as usize;
    let mut candidates = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let (dx, dy) = (x as f64 - px.x, y as f64 - px.y);
            if dx * dx + dy * dy > r * r {
                continue;
            }
            if let Some(j) = real.depth_cloud.at_pixel(x, y) {
                let q = real.depth_cloud.cloud.point(j);
                let feat = real.estimator.descriptor(j).unwrap_or([0.0; FPFH_LEN]);
                candidates.push((q, (q - kp.cam_point).norm(), descriptor_distance(&reference, &feat)));
            }
        }
    }
    if candidates.is_empty() {
        return out;
    }
    let max_e = candidates.iter().map(|c| c.1).fold(0.0, f64::max);
    let max_f = candidates.iter().map(|c| c.2).fold(0.0, f64::max);
    let norm = |v: f64, m: f64| if m > 0.0 { v / m } else { 0.0 };
    let mut best = (f64::INFINITY, candidates[0].0);
    for (q, de, df) in &candidates {
        let score = cfg.w_euclid * norm(*de, max_e) + cfg.w_feat * norm(*df, max_f);
        if score < best.0 {
            best = (score, *q);
        }
    }
    out.pixel = Some(k.project_point(&best.1));
    out.cam_point = best.1;
    out.refinement = Refinement::FeatureMatch;
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRefinement {
    pub camera_pose: RigidTransform,
    pub keypoints: Vec<ProjectedKeypoint>,
    pub icp: Option<IcpResult>,
    pub warning: Option<String>,
}

fn project_and_classify(
    model: &SurfaceModel,
    kps: &Keypoints3D,
    pose: &RigidTransform,
    k: &CameraIntrinsics,
    cfg: &AnnotationConfig,
) -> (Vec<ProjectedKeypoint>, DepthImage) {
    let gen = render_depth(model, pose, k);
    let mut out = project_keypoints(kps, pose, k);
    classify(&mut out, &gen, cfg);
    (out, gen)
}

/// Projection with occlusion tests only.
pub fn project_frame(frame: &AnnotationFrame, model: &SurfaceModel, kps: &Keypoints3D, cfg: &AnnotationConfig) -> Vec<ProjectedKeypoint> {
    project_and_classify(model, kps, &frame.camera_pose, &frame.k, cfg).0
}

fn icp_correction(frame: &AnnotationFrame, model: &SurfaceModel, kps: &Keypoints3D, cfg: &AnnotationConfig) -> Result<IcpResult> {
    let k = &frame.k;
    let gen = render_depth(model, &frame.camera_pose, k);
    let gen_cloud = back_project(&gen, k).cloud;
    let real = back_project(&frame.real_depth, k);
    let kp_cam = frame.camera_pose.apply_all(&kps.points);
    let dilation = cfg.dilation_fraction * keypoint_diagonal(&kp_cam) + cfg.dilation_offset;
    let src = crop_by_keypoint_volume(&gen_cloud, &kp_cam, 0.0)?;
    let keep = crop_indices(&real.cloud.points, &kp_cam, dilation)?;
    let mut tgt = real.cloud.select(&keep);
    tgt.normals = Some(real.normals_for(&keep, cfg.normal_edge_gap));
    icp_point_to_plane(&src, &tgt, &RigidTransform::identity(), &cfg.icp)
}

/// Aligns the rendered model to the measured depth inside the keypoint
/// volume and applies the correction to the camera pose; every keypoint,
/// visible or not, moves with it.
pub fn object_refine(frame: &AnnotationFrame, model: &SurfaceModel, kps: &Keypoints3D, cfg: &AnnotationConfig) -> ObjectRefinement {
    match icp_correction(frame, model, kps, cfg) {
        Ok(icp) => {
            let camera_pose = icp.transform.compose(&frame.camera_pose);
            let (mut keypoints, _) = project_and_classify(model, kps, &camera_pose, &frame.k, cfg);
            for kp in &mut keypoints {
                kp.refinement = Refinement::Icp;
            }
            ObjectRefinement {
                camera_pose,
                keypoints,
                icp: Some(icp),
                warning: None,
            }
        }
        Err(e) => ObjectRefinement {
            camera_pose: frame.camera_pose,
            keypoints: project_frame(frame, model, kps, cfg),
            icp: None,
            warning: Some(format!("object refinement skipped: {e}")),
        },
    }
}

/// Occlusion tests, then per visible keypoint either a jump-edge move or,
/// failing that, a feature match.
pub fn keypoint_refine(
    frame: &AnnotationFrame,
    model: &SurfaceModel,
    kps: &Keypoints3D,
    cfg: &AnnotationConfig,
) -> Result<Vec<ProjectedKeypoint>> {
    let k = &frame.k;
    let (mut out, gen) = project_and_classify(model, kps, &frame.camera_pose, k, cfg);
    if out.iter().all(|kp| kp.visibility == Visibility::Occluded) {
        return Ok(out);
    }
    let gen_cloud = back_project_with_normals(&gen, k, cfg.normal_edge_gap);
    let real_cloud = back_project_with_normals(&frame.real_depth, k, cfg.normal_edge_gap);
    let mut gen_src = FeatureSource::new(&gen_cloud, cfg.fpfh_radius, cfg.fpfh_max_neighbors)?;
    let mut real_src = FeatureSource::new(&real_cloud, cfg.fpfh_radius, cfg.fpfh_max_neighbors)?;
    for kp in out.iter_mut() {
        let jumped = jump_edge_adjust(kp, &frame.real_depth, &gen, k, cfg.jump_threshold, cfg.jump_window);
        *kp = if jumped.refinement == Refinement::JumpEdge {
            jumped
        } else {
            feature_match_refine(kp, &mut gen_src, &mut real_src, k, cfg)
        };
    }
    Ok(out)
}
