//! Seeded synthetic scenarios: a box-like keypoint category with a PCA
//! basis, noisy 2D observations and heatmaps with known poses, and a depth
//! sequence of a box on a ground plane for the annotation tools.

use std::path::Path;

use nalgebra::{Matrix2xX, Matrix3xX, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotation::{render_depth, DepthImage, SurfaceModel};
use crate::error::{Error, Result};
use crate::geometry::{so3_exp, CameraIntrinsics, RigidTransform, Rotation};
use crate::heatmap::{synth_heatmap, CropMapping, HeatmapStack};
use crate::io::{
    format_tum, save_basis, save_keypoints, write_atomic, write_json, GroundTruthFile, ObservationFile, TrajectoryEntry, TransformJson,
};
use crate::shape::{build_pca_basis, ComponentSelection, Keypoints3D, ShapeBasis, ShapeCoefficients};
use crate::solver::KeypointObservations;

pub const KEYPOINT_NAMES: [&str; 10] = [
    "corner_000",
    "corner_100",
    "corner_010",
    "corner_110",
    "corner_001",
    "corner_101",
    "corner_011",
    "corner_111",
    "top_center",
    "front_center",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    pub pixel_sigma: f64,
    pub outlier_fraction: f64,
    pub outlier_confidence: f64,
    pub inlier_confidence: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            pixel_sigma: 0.0,
            outlier_fraction: 0.0,
            outlier_confidence: 0.05,
            inlier_confidence: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub frames: usize,
    pub noise: NoiseModel,
    pub instances: usize,
    pub components: usize,
    pub intrinsics: CameraIntrinsics,
    pub min_depth: f64,
    pub max_depth: f64,
    pub heatmap_stride: usize,
    /// Depth sequence length; zero skips it.
    pub depth_frames: usize,
    pub drift_rotation_deg: f64,
    pub drift_translation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            frames: 20,
            noise: NoiseModel::default(),
            instances: 20,
            components: 2,
            intrinsics: CameraIntrinsics {
                fx: 500.0,
                fy: 500.0,
                cx: 319.5,
                cy: 239.5,
                width: 640,
                height: 480,
            },
            min_depth: 2.0,
            max_depth: 4.0,
            heatmap_stride: 8,
            depth_frames: 10,
            drift_rotation_deg: 2.0,
            drift_translation: 0.03,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let n = &self.noise;
        let ok = n.pixel_sigma >= 0.0
            && (0.0..=1.0).contains(&n.outlier_fraction)
            && n.outlier_confidence >= 0.0
            && n.inlier_confidence > 0.0
            && self.instances >= 2
            && self.min_depth > 0.0
            && self.max_depth >= self.min_depth
            && self.heatmap_stride > 0
            && self.drift_rotation_deg >= 0.0
            && self.drift_translation >= 0.0;
        if !ok {
            return Err(Error::InvalidInput(format!("bad synthetic config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFrame {
    pub frame_id: String,
    pub pose: RigidTransform,
    pub coefficients: ShapeCoefficients,
    /// Noise-free projections.
    pub clean: Matrix2xX<f64>,
    pub observations: KeypointObservations,
    pub outliers: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthSequence {
    pub model: SurfaceModel,
    pub keypoints: Keypoints3D,
    pub ground_truth: Vec<RigidTransform>,
    pub drifted: Vec<RigidTransform>,
    pub depths: Vec<DepthImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScenario {
    pub config: SynthConfig,
    pub instances: Vec<Matrix3xX<f64>>,
    pub basis: ShapeBasis,
    pub frames: Vec<SynthFrame>,
    pub depth: Option<DepthSequence>,
}

pub fn frame_id(i: usize) -> String {
    format!("{i:06}")
}

fn names() -> Vec<String> {
    KEYPOINT_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Keypoints of a box with the given side lengths, centered at the origin.
pub fn box_keypoints(size: &Vector3<f64>) -> Matrix3xX<f64> {
    let h = size / 2.0;
    let mut cols = Vec::with_capacity(10);
    for i in 0..8 {
        let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
        let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
        let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
        cols.push(Vector3::new(sx * h.x, sy * h.y, sz * h.z));
    }
    cols.push(Vector3::new(0.0, 0.0, h.z));
    cols.push(Vector3::new(0.0, -h.y, 0.0));
    Matrix3xX::from_columns(&cols)
}

pub fn random_rotation(rng: &mut impl Rng) -> Rotation {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let q = Quaternion::new(n.sample(rng), n.sample(rng), n.sample(rng), n.sample(rng));
    Rotation::nearest(UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix())
}

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v = Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
        if v.norm() > 1e-9 {
            return v.normalize();
        }
    }
}

/// Random perturbation with rotation angle and translation length drawn
/// uniformly up to the given bounds.
pub fn random_drift(rng: &mut impl Rng, max_angle: f64, max_translation: f64) -> RigidTransform {
    let angle = rng.random_range(0.0..=max_angle);
    let axis = random_unit(rng);
    let len = rng.random_range(0.0..=max_translation);
    let dir = random_unit(rng);
    RigidTransform::new(so3_exp(&(axis * angle)), dir * len)
}

fn project(points: &Matrix3xX<f64>, pose: &RigidTransform, k: &CameraIntrinsics) -> Matrix2xX<f64> {
    let cam = pose.apply_all(points);
    Matrix2xX::from_fn(points.ncols(), |r, c| {
        let p = cam.column(c);
        if r == 0 {
            k.fx * p.x / p.z + k.cx
        } else {
            k.fy * p.y / p.z + k.cy
        }
    })
}

fn object_pose(rng: &mut impl Rng, cfg: &SynthConfig, shape: &Matrix3xX<f64>) -> RigidTransform {
    let k = &cfg.intrinsics;
    loop {
        let rotation = random_rotation(rng);
        let z = rng.random_range(cfg.min_depth..=cfg.max_depth);
        let x = rng.random_range(-0.15..=0.15) * z;
        let y = rng.random_range(-0.1..=0.1) * z;
        let pose = RigidTransform::new(rotation, Vector3::new(x, y, z));
        let cam = pose.apply_all(shape);
        let w = project(shape, &pose, k);
        let inside = cam.row(2).iter().all(|&d| d > 0.1) && w.column_iter().all(|p| k.pixel_index(p.x, p.y).is_some());
        if inside {
            return pose;
        }
    }
}

fn observe(rng: &mut impl Rng, clean: &Matrix2xX<f64>, cfg: &SynthConfig) -> (KeypointObservations, Vec<bool>) {
    let p = clean.ncols();
    let noise = &cfg.noise;
    let k = &cfg.intrinsics;
    let n_out = (noise.outlier_fraction * p as f64).round() as usize;
    let mut order: Vec<usize> = (0..p).collect();
    for i in 0..n_out.min(p) {
        let j = rng.random_range(i..p);
        order.swap(i, j);
    }
    let mut outliers = vec![false; p];
    for &i in &order[..n_out.min(p)] {
        outliers[i] = true;
    }
    let gauss = Normal::new(0.0, noise.pixel_sigma.max(0.0)).expect("valid sigma");
    let mut w = clean.clone();
    let mut d = vec![noise.inlier_confidence; p];
    for i in 0..p {
        if outliers[i] {
            w[(0, i)] = rng.random_range(0.0..(k.width as f64 - 1.0));
            w[(1, i)] = rng.random_range(0.0..(k.height as f64 - 1.0));
            d[i] = noise.outlier_confidence;
        } else if noise.pixel_sigma > 0.0 {
            w[(0, i)] += gauss.sample(rng);
            w[(1, i)] += gauss.sample(rng);
        }
    }
    (KeypointObservations { w, d }, outliers)
}

/// Box resting on a ground plane; the box bottom is left open.
pub fn box_scene(size: &Vector3<f64>, ground_half: f64) -> Result<(SurfaceModel, Keypoints3D)> {
    let h = size / 2.0;
    let mut v = Vec::new();
    for i in 0..8 {
        let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
        let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
        let z = if i & 4 == 0 { 0.0 } else { size.z };
        v.push(Vector3::new(sx * h.x, sy * h.y, z));
    }
    let g = ground_half;
    v.extend([
        Vector3::new(-g, -g, 0.0),
        Vector3::new(g, -g, 0.0),
        Vector3::new(g, g, 0.0),
        Vector3::new(-g, g, 0.0),
    ]);
    let quads = [[4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5], [8, 9, 10, 11]];
    let mut tris = Vec::new();
    for q in quads {
        tris.push([q[0], q[1], q[2]]);
        tris.push([q[0], q[2], q[3]]);
    }
    let vertices = Matrix3xX::from_columns(&v);
    let model = SurfaceModel::new(vertices.clone(), tris, None)?;
    // keypoint normals average the box faces meeting at each corner
    let corners = vertices.columns(0, 8).into_owned();
    let normals = Matrix3xX::from_fn(8, |r, c| {
        let n = Vector3::new(
            if c & 1 == 0 { -1.0 } else { 1.0 },
            if c & 2 == 0 { -1.0 } else { 1.0 },
            if c & 4 == 0 { -1.0 } else { 1.0 },
        );
        n.normalize()[r]
    });
    let keypoints = Keypoints3D::new(corners, KEYPOINT_NAMES[..8].iter().map(|s| s.to_string()).collect(), Some(normals))?;
    Ok((model, keypoints))
}

/// Fixed-to-camera transform of a camera at `eye` looking at `target`, with
/// the fixed frame's +z up.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> RigidTransform {
    let z = (target - eye).normalize();
    let x = z.cross(&Vector3::z()).normalize();
    let y = z.cross(&x);
    let r_wc = nalgebra::Matrix3::from_columns(&[x, y, z]);
    let rotation = Rotation::nearest(&r_wc.transpose());
    RigidTransform::new(rotation, -(rotation.rotate(eye)))
}

fn depth_sequence(rng: &mut impl Rng, cfg: &SynthConfig) -> Result<DepthSequence> {
    let size = Vector3::new(0.4, 0.3, 0.2);
    let (model, keypoints) = box_scene(&size, 1.5)?;
    let target = Vector3::new(0.0, 0.0, size.z / 2.0);
    let n = cfg.depth_frames;
    let mut ground_truth = Vec::with_capacity(n);
    let mut drifted = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    for i in 0..n {
        let azimuth = std::f64::consts::TAU * i as f64 / n as f64 + rng.random_range(-0.1..0.1);
        let elevation = rng.random_range(30f64..50.0).to_radians();
        let dist = rng.random_range(1.1..1.4);
        let eye = target
            + Vector3::new(
                dist * elevation.cos() * azimuth.cos(),
                dist * elevation.cos() * azimuth.sin(),
                dist * elevation.sin(),
            );
        let gt = look_at(&eye, &target);
        let drift = random_drift(rng, cfg.drift_rotation_deg.to_radians(), cfg.drift_translation);
        depths.push(render_depth(&model, &gt, &cfg.intrinsics));
        ground_truth.push(gt);
        drifted.push(drift.compose(&gt));
    }
    Ok(DepthSequence {
        model,
        keypoints,
        ground_truth,
        drifted,
        depths,
    })
}

/// Same configuration, same scenario, bit for bit.
pub fn generate(cfg: &SynthConfig) -> Result<SyntheticScenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let instances: Vec<Matrix3xX<f64>> = (0..cfg.instances)
        .map(|_| {
            let size = Vector3::new(rng.random_range(0.3..0.6), rng.random_range(0.2..0.4), rng.random_range(0.1..0.3));
            box_keypoints(&size)
        })
        .collect();
    let basis = build_pca_basis(&instances, names(), ComponentSelection::Count(cfg.components))?;

    let mut frames = Vec::with_capacity(cfg.frames);
    for i in 0..cfg.frames {
        let c: Vec<f64> = basis.eigenvalues.iter().map(|e| e.sqrt() * rng.random_range(-1.5..1.5)).collect();
        let coefficients = ShapeCoefficients::from_slice(&c);
        let shape = basis.instantiate(&coefficients)?;
        let pose = object_pose(&mut rng, cfg, &shape);
        let clean = project(&shape, &pose, &cfg.intrinsics);
        let (observations, outliers) = observe(&mut rng, &clean, cfg);
        frames.push(SynthFrame {
            frame_id: frame_id(i),
            pose,
            coefficients,
            clean,
            observations,
            outliers,
        });
    }
    let mut depth_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_de97);
    let depth = if cfg.depth_frames > 0 {
        Some(depth_sequence(&mut depth_rng, cfg)?)
    } else {
        None
    };
    Ok(SyntheticScenario {
        config: *cfg,
        instances,
        basis,
        frames,
        depth,
    })
}

impl SynthFrame {
    pub fn heatmaps(&self, names: &[String], cfg: &SynthConfig) -> Result<HeatmapStack> {
        let s = cfg.heatmap_stride as f64;
        let k = &cfg.intrinsics;
        let (w, h) = (
            (k.width as usize).div_ceil(cfg.heatmap_stride),
            (k.height as usize).div_ceil(cfg.heatmap_stride),
        );
        let crop = CropMapping {
            scale: [s, s],
            offset: [0.0, 0.0],
        };
        let maps = names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let (u, v) = crop.to_heatmap(self.observations.w[(0, i)], self.observations.w[(1, i)]);
                synth_heatmap(u, v, h, w, 1.0, self.observations.d[i], n.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HeatmapStack { maps, crop })
    }

    pub fn ground_truth(&self) -> GroundTruthFile {
        let t = TransformJson::from_transform(&self.pose);
        GroundTruthFile {
            frame_id: self.frame_id.clone(),
            rotation: t.rotation,
            translation: t.translation,
            coefficients: self.coefficients.as_slice().to_vec(),
        }
    }
}

impl SyntheticScenario {
    /// Writes the scenario layout:
    /// `config.json basis.json intrinsics.json object.ply symmetries.json
    /// instances/ observations/ heatmaps/ gt/` and, with a depth sequence,
    /// `scene.ply keypoints3d.json trajectory_gt.txt trajectory_drift.txt depth/`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let cfg = &self.config;
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("config.json"), cfg)?;
        save_basis(&dir.join("basis.json"), &self.basis)?;
        write_json(&dir.join("intrinsics.json"), &cfg.intrinsics)?;
        write_json(&dir.join("symmetries.json"), &Vec::<TransformJson>::new())?;
        let object = SurfaceModel::new(self.basis.b0.clone(), Vec::new(), None)?;
        write_atomic(&dir.join("object.ply"), object.to_ply().as_bytes())?;
        for (i, inst) in self.instances.iter().enumerate() {
            let kps = Keypoints3D::new(inst.clone(), names(), None)?;
            save_keypoints(&dir.join("instances").join(format!("instance_{i:03}.json")), &kps)?;
        }
        let names = names();
        for f in &self.frames {
            let obs = ObservationFile::from_observations(&f.frame_id, &f.observations, &names);
            write_json(&dir.join("observations").join(format!("{}.json", f.frame_id)), &obs)?;
            write_json(&dir.join("gt").join(format!("{}.json", f.frame_id)), &f.ground_truth())?;
            f.heatmaps(&names, cfg)?
                .save(&dir.join("heatmaps").join(format!("{}.khm", f.frame_id)))?;
        }
        if let Some(seq) = &self.depth {
            write_atomic(&dir.join("scene.ply"), seq.model.to_ply().as_bytes())?;
            save_keypoints(&dir.join("keypoints3d.json"), &seq.keypoints)?;
            let traj = |poses: &[RigidTransform]| {
                let entries: Vec<TrajectoryEntry> = poses
                    .iter()
                    .enumerate()
                    .map(|(i, p)| TrajectoryEntry {
                        timestamp: i as f64,
                        pose: *p,
                    })
                    .collect();
                format_tum(&entries)
            };
            write_atomic(&dir.join("trajectory_gt.txt"), traj(&seq.ground_truth).as_bytes())?;
            write_atomic(&dir.join("trajectory_drift.txt"), traj(&seq.drifted).as_bytes())?;
            for (i, d) in seq.depths.iter().enumerate() {
                write_atomic(&dir.join("depth").join(format!("{}.pfm", frame_id(i))), &d.to_pfm())?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project_full;

    fn small() -> SynthConfig {
        SynthConfig {
            frames: 5,
            depth_frames: 2,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_scenario() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(other.frames[0].pose, generate(&small()).unwrap().frames[0].pose);
    }

    #[test]
    fn noiseless_observations_are_exact_projections() {
        let s = generate(&small()).unwrap();
        for f in &s.frames {
            let shape = s.basis.instantiate(&f.coefficients).unwrap();
            let w = project_full(&shape, &f.pose, &s.config.intrinsics).unwrap();
            assert!((w - &f.observations.w).amax() < 1e-9);
            assert!(f.observations.d.iter().all(|&d| d == 0.9));
        }
    }

    #[test]
    fn outliers_get_low_confidence() {
        let cfg = SynthConfig {
            noise: NoiseModel {
                outlier_fraction: 0.3,
                pixel_sigma: 2.0,
                ..Default::default()
            },
            ..small()
        };
        let s = generate(&cfg).unwrap();
        for f in &s.frames {
            assert_eq!(f.outliers.iter().filter(|&&o| o).count(), 3);
            for (o, d) in f.outliers.iter().zip(&f.observations.d) {
                assert_eq!(*d, if *o { 0.05 } else { 0.9 });
            }
        }
    }

    #[test]
    fn basis_keeps_two_modes() {
        let s = generate(&small()).unwrap();
        assert_eq!(s.basis.num_modes(), 2);
        assert_eq!(s.basis.keypoint_names.len(), 10);
    }

    #[test]
    fn look_at_centers_target() {
        let k = SynthConfig::default().intrinsics;
        let pose = look_at(&Vector3::new(1.0, -0.5, 0.8), &Vector3::new(0.0, 0.0, 0.1));
        let c = pose.apply(&Vector3::new(0.0, 0.0, 0.1));
        assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12 && c.z > 0.0);
        // up in the world is up in the image
        let above = k.project_point(&pose.apply(&Vector3::new(0.0, 0.0, 0.3)));
        assert!(above.y < k.project_point(&c).y);
    }

    #[test]
    fn depth_sequence_sees_the_box() {
        let s = generate(&small()).unwrap();
        let seq = s.depth.unwrap();
        for (gt, d) in seq.ground_truth.iter().zip(&seq.depths) {
            let center = gt.apply(&Vector3::new(0.0, 0.0, 0.2));
            let px = s.config.intrinsics.project_point(&center);
            let (x, y) = s.config.intrinsics.pixel_index(px.x, px.y).unwrap();
            let cam = s.config.intrinsics.unproject(x as f64, y as f64, d.get(x, y));
            // the pixel sees the box top
            assert!((gt.inverse().apply(&cam).z - 0.2).abs() < 1e-9);
        }
    }

    #[test]
    fn heatmap_peaks_track_observations() {
        let s = generate(&small()).unwrap();
        let f = &s.frames[0];
        let stack = f.heatmaps(&s.basis.keypoint_names, &s.config).unwrap();
        for (i, m) in stack.maps.iter().enumerate() {
            let p = crate::heatmap::extract_peak(m);
            let (u, v) = stack.crop.to_image(p.u, p.v);
            assert!((u - f.observations.w[(0, i)]).abs() <= 4.0 + 1e-9);
            assert!((v - f.observations.w[(1, i)]).abs() <= 4.0 + 1e-9);
        }
    }
}
