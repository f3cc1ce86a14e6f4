//! File formats and filesystem helpers.
//!
//! JSON layouts:
//! - intrinsics: `{fx, fy, cx, cy, width, height}`
//! - 3D keypoints: `[{name, position: [x, y, z], normal?: [nx, ny, nz]}]`
//! - observations: `{frame_id, keypoints: [{name, u, v, confidence}]}`
//! - ground truth: `{frame_id, rotation: 3x3 rows, translation, coefficients}`
//! - symmetries: `[{rotation: 3x3 rows, translation}]`
//!
//! Trajectories use the TUM line format `timestamp tx ty tz qx qy qz qw`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix2xX, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidTransform, Rotation};
use crate::metrics::SymmetrySet;
use crate::shape::{Keypoints3D, ShapeBasis};
use crate::solver::KeypointObservations;

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Files in `dir` with extension `ext`, sorted by name.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn load_basis(path: &Path) -> Result<ShapeBasis> {
    ShapeBasis::from_json(&read_json(path)?)
}

pub fn save_basis(path: &Path, basis: &ShapeBasis) -> Result<()> {
    write_json(path, &basis.to_json())
}

pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let k: CameraIntrinsics = read_json(path)?;
    k.validate()?;
    Ok(k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointEntry {
    pub name: String,
    pub position: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal: Option<[f64; 3]>,
}

/// Normals must be given for all keypoints or none.
pub fn keypoints_from_entries(entries: &[KeypointEntry]) -> Result<Keypoints3D> {
    let n = entries.len();
    let points = nalgebra::Matrix3xX::from_fn(n, |r, c| entries[c].position[r]);
    let with_normals = entries.iter().filter(|e| e.normal.is_some()).count();
    let normals = if with_normals == 0 {
        None
    } else if with_normals == n {
        Some(nalgebra::Matrix3xX::from_fn(n, |r, c| entries[c].normal.unwrap_or_default()[r]))
    } else {
        return Err(Error::InvalidInput("normals given for some keypoints but not all".into()));
    };
    Keypoints3D::new(points, entries.iter().map(|e| e.name.clone()).collect(), normals)
}

pub fn keypoints_to_entries(kps: &Keypoints3D) -> Vec<KeypointEntry> {
    (0..kps.len())
        .map(|i| {
            let p = kps.points.column(i);
            KeypointEntry {
                name: kps.names[i].clone(),
                position: [p.x, p.y, p.z],
                normal: kps.normal(i).map(|n| [n.x, n.y, n.z]),
            }
        })
        .collect()
}

pub fn load_keypoints(path: &Path) -> Result<Keypoints3D> {
    let entries: Vec<KeypointEntry> = read_json(path)?;
    keypoints_from_entries(&entries)
}

pub fn save_keypoints(path: &Path, kps: &Keypoints3D) -> Result<()> {
    write_json(path, &keypoints_to_entries(kps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Observation2D {
    pub name: String,
    pub u: f64,
    pub v: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationFile {
    pub frame_id: String,
    pub keypoints: Vec<Observation2D>,
}

impl ObservationFile {
    /// Orders observations by basis keypoint; keypoints absent from the file
    /// get zero confidence.
    pub fn to_observations(&self, names: &[String]) -> Result<KeypointObservations> {
        let mut w = Matrix2xX::zeros(names.len());
        let mut d = vec![0.0; names.len()];
        for o in &self.keypoints {
            let i = names
                .iter()
                .position(|n| n == &o.name)
                .ok_or_else(|| Error::InvalidInput(format!("frame {}: unknown keypoint '{}'", self.frame_id, o.name)))?;
            w[(0, i)] = o.u;
            w[(1, i)] = o.v;
            d[i] = o.confidence;
        }
        KeypointObservations::new(w, d)
    }

    pub fn from_observations(frame_id: &str, obs: &KeypointObservations, names: &[String]) -> Self {
        ObservationFile {
            frame_id: frame_id.to_string(),
            keypoints: names
                .iter()
                .enumerate()
                .map(|(i, n)| Observation2D {
                    name: n.clone(),
                    u: obs.w[(0, i)],
                    v: obs.w[(1, i)],
                    confidence: obs.d[i],
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformJson {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl TransformJson {
    pub fn from_transform(t: &RigidTransform) -> Self {
        TransformJson {
            rotation: t.rotation.to_rows(),
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }

    /// Rotations are re-orthonormalized when within `1e-6` of a rotation,
    /// since text round-trips drift slightly.
    pub fn to_transform(&self) -> Result<RigidTransform> {
        let m = nalgebra::Matrix3::from_fn(|r, c| self.rotation[r][c]);
        let rotation = match Rotation::from_matrix(m) {
            Ok(r) => r,
            Err(e) => {
                let near = Rotation::nearest(&m);
                if (near.matrix() - m).amax() < 1e-6 {
                    near
                } else {
                    return Err(e);
                }
            }
        };
        Ok(RigidTransform::new(rotation, Vector3::from(self.translation)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthFile {
    pub frame_id: String,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub coefficients: Vec<f64>,
}

impl GroundTruthFile {
    pub fn pose(&self) -> Result<RigidTransform> {
        TransformJson {
            rotation: self.rotation,
            translation: self.translation,
        }
        .to_transform()
    }
}

pub fn load_symmetries(path: &Path) -> Result<SymmetrySet> {
    let list: Vec<TransformJson> = read_json(path)?;
    let transforms = list.iter().map(TransformJson::to_transform).collect::<Result<Vec<_>>>()?;
    Ok(SymmetrySet::new(transforms))
}

/// One TUM line: timestamp and the fixed-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    pub pose: RigidTransform,
}

pub fn parse_tum(text: &str) -> Result<Vec<TrajectoryEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse("TUM", format!("line {}: {e}", lineno + 1)))?;
        let [timestamp, tx, ty, tz, qx, qy, qz, qw] = vals[..] else {
            return Err(Error::parse(
                "TUM",
                format!("line {}: expected 8 values, got {}", lineno + 1, vals.len()),
            ));
        };
        let rotation = Rotation::from_quaternion(qx, qy, qz, qw).map_err(|e| Error::parse("TUM", format!("line {}: {e}", lineno + 1)))?;
        out.push(TrajectoryEntry {
            timestamp,
            pose: RigidTransform::new(rotation, Vector3::new(tx, ty, tz)),
        });
    }
    Ok(out)
}

pub fn format_tum(entries: &[TrajectoryEntry]) -> String {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for e in entries {
        let t = e.pose.translation;
        let [qx, qy, qz, qw] = e.pose.rotation.to_quaternion();
        let _ = writeln!(out, "{} {} {} {} {} {} {} {}", e.timestamp, t.x, t.y, t.z, qx, qy, qz, qw);
    }
    out
}

pub fn read_depth(path: &Path) -> Result<crate::annotation::DepthImage> {
    let bytes = std::fs::read(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => crate::annotation::DepthImage::from_pfm(&bytes),
        Some("pgm") => crate::annotation::DepthImage::from_pgm(&bytes),
        _ => Err(Error::InvalidInput(format!("unknown depth format: {}", path.display()))),
    }
}
