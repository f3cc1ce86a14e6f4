//! Point-to-plane ICP with a small-angle linearization.

use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::cloud::{nearest, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{so3_exp, RigidTransform};
use crate::solver::linalg::solve_symmetric;

const MIN_CORRESPONDENCES: usize = 6;
const RANK_TOL: f64 = 1e-8;
const MAX_HALVINGS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcpConfig {
    pub max_iters: usize,
    pub corr_dist: f64,
    pub rel_tol: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iters: 30,
            corr_dist: 0.1,
            rel_tol: 1e-6,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.corr_dist > 0.0) || !(self.rel_tol >= 0.0) {
            return Err(Error::InvalidInput(format!("bad ICP config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps source points onto the target.
    pub transform: RigidTransform,
    pub initial_error: f64,
    pub final_error: f64,
    pub iterations: usize,
    pub correspondences: usize,
    /// Set when the 6x6 system lost rank at some iteration (e.g. planar scenes).
    pub rank_deficient: bool,
}

struct Target<'a> {
    cloud: &'a PointCloud,
    normals: &'a nalgebra::Matrix3xX<f64>,
    tree: kiddo::ImmutableKdTree<f64, 3>,
}

struct Matches {
    /// `(source index, target index)`
    pairs: Vec<(usize, usize)>,
    /// Mean over all source points of the squared point-to-plane residual,
    /// with unmatched points charged `corr_dist²`.
    error: f64,
}

impl Target<'_> {
    fn matches(&self, src: &PointCloud, t: &RigidTransform, corr_dist: f64) -> Matches {
        let mut pairs = Vec::new();
        let mut acc = 0.0;
        let cap = corr_dist * corr_dist;
        for i in 0..src.len() {
            let p = t.apply(&src.point(i));
            match nearest(&self.tree, &p) {
                Some((j, d)) if d <= corr_dist => {
                    let r = self.normals.column(j).dot(&(p - self.cloud.point(j)));
                    acc += (r * r).min(cap);
                    pairs.push((i, j));
                }
                _ => acc += cap,
            }
        }
        Matches {
            pairs,
            error: acc / src.len().max(1) as f64,
        }
    }
}

/// Registers `src` to `tgt` starting from `init`. Steps that would raise the
/// error are halved and, failing that, rejected, so the final error never
/// exceeds the initial one.
pub fn icp_point_to_plane(src: &PointCloud, tgt: &PointCloud, init: &RigidTransform, cfg: &IcpConfig) -> Result<IcpResult> {
    cfg.validate()?;
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::InsufficientOverlap {
            found: 0,
            needed: MIN_CORRESPONDENCES,
        });
    }
    let normals = tgt
        .normals
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("ICP target needs normals".into()))?;
    let target = Target {
        cloud: tgt,
        normals,
        tree: tgt.kd_tree(),
    };
    let mut t = *init;
    let mut m = target.matches(src, &t, cfg.corr_dist);
    if m.pairs.len() < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientOverlap {
            found: m.pairs.len(),
            needed: MIN_CORRESPONDENCES,
        });
    }
    let initial_error = m.error;
    let mut rank_deficient = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        for &(i, j) in &m.pairs {
            let p = t.apply(&src.point(i));
            let n: Vector3<f64> = normals.column(j).into_owned();
            let r = n.dot(&(p - tgt.point(j)));
            let pc = p.cross(&n);
            let jac = Vector6::new(pc.x, pc.y, pc.z, n.x, n.y, n.z);
            jtj += jac * jac.transpose();
            jtr += jac * r;
        }
        let eig = jtj.symmetric_eigen().eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        if !(hi > 0.0) {
            break;
        }
        if lo < RANK_TOL * hi {
            rank_deficient = true;
        }
        let sol = solve_symmetric(
            &DMatrix::from_iterator(6, 6, jtj.iter().copied()),
            &DVector::from_iterator(6, (-jtr).iter().copied()),
            1.0 / RANK_TOL,
        );
        let step = sol.x;
        let mut accepted = None;
        let mut scale = 1.0;
        for _ in 0..MAX_HALVINGS {
            let omega = Vector3::new(step[0], step[1], step[2]) * scale;
            let dt = Vector3::new(step[3], step[4], step[5]) * scale;
            let delta = RigidTransform::new(so3_exp(&omega), dt);
            let cand = delta.compose(&t);
            let cm = target.matches(src, &cand, cfg.corr_dist);
            if cm.error <= m.error && cm.pairs.len() >= MIN_CORRESPONDENCES {
                accepted = Some((cand, cm));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, cm)) = accepted else {
            break;
        };
        let prev = m.error;
        t = cand;
        m = cm;
        if prev - m.error <= cfg.rel_tol * prev {
            break;
        }
    }
    debug_assert!(m.error <= initial_error);
    Ok(IcpResult {
        transform: t,
        initial_error,
        final_error: m.error,
        iterations,
        correspondences: m.pairs.len(),
        rank_deficient,
    })
}
