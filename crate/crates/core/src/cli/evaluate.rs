use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::solve::{FrameStatus, PoseFile};
use super::{EvaluateArgs, Outcome, RunConfig};
use crate::annotation::SurfaceModel;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidTransform, Rotation};
use crate::io::{list_files, load_intrinsics, load_symmetries, read_json, write_atomic, write_json, GroundTruthFile, TransformJson};
use crate::metrics::{
    median, mspd, mssd, recall_at_thresholds, rotation_geodesic, translation_error, ArThresholds, ModelPoints, SymmetrySet,
};

/// Errors for one frame; `None` where the estimate does not determine them.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMetrics {
    pub frame_id: String,
    pub rotation_deg: Option<f64>,
    pub translation_m: Option<f64>,
    pub mssd_m: Option<f64>,
    pub mspd_px: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub frames: usize,
    pub failed_frames: usize,
    pub median_rotation_deg: Option<f64>,
    pub median_translation_m: Option<f64>,
    pub median_mssd_m: Option<f64>,
    pub median_mspd_px: Option<f64>,
    pub ar_mssd: f64,
    pub ar_mspd: f64,
    /// Mean of the two recalls.
    pub ar: f64,
    pub model_diameter_m: f64,
}

enum Estimate {
    Full(RigidTransform),
    RotationOnly(Rotation),
    None,
}

fn estimate_of(p: &PoseFile) -> Result<Estimate> {
    if p.status == FrameStatus::Failed {
        return Ok(Estimate::None);
    }
    if let Some(f) = &p.full {
        let t = TransformJson {
            rotation: f.rotation,
            translation: f.translation,
        };
        return Ok(Estimate::Full(t.to_transform()?));
    }
    if let Some(w) = &p.weak {
        let t = TransformJson {
            rotation: w.rotation,
            translation: [0.0; 3],
        };
        return Ok(Estimate::RotationOnly(t.to_transform()?.rotation));
    }
    Ok(Estimate::None)
}

fn frame_metrics(
    frame_id: &str,
    est: &Estimate,
    gt: &RigidTransform,
    model: &ModelPoints,
    sym: &SymmetrySet,
    k: &CameraIntrinsics,
) -> FrameMetrics {
    let mut m = FrameMetrics {
        frame_id: frame_id.to_string(),
        rotation_deg: None,
        translation_m: None,
        mssd_m: None,
        mspd_px: None,
    };
    match est {
        Estimate::Full(e) => {
            m.rotation_deg = Some(rotation_geodesic(&e.rotation, &gt.rotation).to_degrees());
            m.translation_m = Some(translation_error(&e.translation, &gt.translation));
            m.mssd_m = Some(mssd(e, gt, model, sym));
            m.mspd_px = mspd(e, gt, model, sym, k).ok();
        }
        Estimate::RotationOnly(r) => {
            m.rotation_deg = Some(rotation_geodesic(r, &gt.rotation).to_degrees());
        }
        Estimate::None => {}
    }
    m
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn to_csv(rows: &[FrameMetrics]) -> String {
    let mut out = String::from("frame_id,rotation_deg,translation_m,mssd_m,mspd_px\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.frame_id,
            cell(r.rotation_deg),
            cell(r.translation_m),
            cell(r.mssd_m),
            cell(r.mspd_px)
        );
    }
    out
}

/// Frames without a metric count as misses in the recalls.
pub fn summarize(rows: &[FrameMetrics], diameter: f64, ar: &ArThresholds, k: &CameraIntrinsics) -> Result<Summary> {
    let col = |f: fn(&FrameMetrics) -> Option<f64>| -> Vec<f64> { rows.iter().map(|r| f(r).unwrap_or(f64::INFINITY)).collect() };
    let rot = col(|r| r.rotation_deg);
    let trans = col(|r| r.translation_m);
    let e_mssd = col(|r| r.mssd_m);
    let e_mspd = col(|r| r.mspd_px);
    let ar_mssd = recall_at_thresholds(&e_mssd, &ar.mssd_thresholds(diameter))?;
    let ar_mspd = recall_at_thresholds(&e_mspd, &ar.mspd_thresholds(k.width))?;
    Ok(Summary {
        frames: rows.len(),
        failed_frames: rows.iter().filter(|r| r.mssd_m.is_none() || r.mspd_px.is_none()).count(),
        median_rotation_deg: median(&rot),
        median_translation_m: median(&trans),
        median_mssd_m: median(&e_mssd),
        median_mspd_px: median(&e_mspd),
        ar_mssd,
        ar_mspd,
        ar: 0.5 * (ar_mssd + ar_mspd),
        model_diameter_m: diameter,
    })
}

pub(super) fn run(args: &EvaluateArgs, cfg: &RunConfig) -> Result<Outcome> {
    let k = load_intrinsics(&args.intrinsics)?;
    let mesh = SurfaceModel::from_ply(&std::fs::read_to_string(&args.model)?)?;
    let model = ModelPoints::new(mesh.vertices)?;
    let sym = match &args.symmetries {
        Some(p) => load_symmetries(p)?,
        None => SymmetrySet::identity_only(),
    };

    let mut poses = BTreeMap::new();
    for p in list_files(&args.poses, "json")? {
        let f: PoseFile = read_json(&p)?;
        poses.insert(f.frame_id.clone(), f);
    }
    let mut gts = BTreeMap::new();
    for p in list_files(&args.gt, "json")? {
        let f: GroundTruthFile = read_json(&p)?;
        gts.insert(f.frame_id.clone(), f);
    }
    if poses.is_empty() {
        return Err(Error::InvalidInput("no pose files found".into()));
    }
    let missing: Vec<&String> = poses
        .keys()
        .filter(|id| !gts.contains_key(*id))
        .chain(gts.keys().filter(|id| !poses.contains_key(*id)))
        .collect();
    if !missing.is_empty() {
        return Err(Error::InvalidInput(format!("frame ids without a match: {missing:?}")));
    }

    let mut rows = Vec::with_capacity(poses.len());
    for (id, p) in &poses {
        let gt = gts[id].pose()?;
        rows.push(frame_metrics(id, &estimate_of(p)?, &gt, &model, &sym, &k));
    }
    let summary = summarize(&rows, model.diameter(), &cfg.ar, &k)?;
    write_atomic(&args.out.join("metrics.csv"), to_csv(&rows).as_bytes())?;
    write_json(&args.out.join("summary.json"), &summary)?;
    println!(
        "{} frames, median rotation {:.4} deg, AR {:.4}",
        summary.frames,
        summary.median_rotation_deg.unwrap_or(f64::NAN),
        summary.ar
    );
    Ok(Outcome::from_failures(summary.failed_frames))
}
