//! Fast point feature histograms: three angular features per point pair,
//! 11 bins each.

use std::collections::HashMap;

use kiddo::ImmutableKdTree;
use nalgebra::Vector3;

use super::cloud::{nearest, nearest_within, within, PointCloud};
use crate::error::{Error, Result};

pub const FPFH_BINS: usize = 11;
pub const FPFH_LEN: usize = 3 * FPFH_BINS;

pub type Descriptor = [f64; FPFH_LEN];

#[derive(Debug, Clone, PartialEq)]
pub struct FpfhResult {
    pub descriptors: Vec<Descriptor>,
    /// Points without neighbors inside the radius; their descriptor is zero.
    pub isolated: Vec<bool>,
}

/// `(f1, f2, f3)` for a pair, with the source chosen as the point whose
/// normal makes the smaller angle with the connecting line. `None` when
/// the points coincide or the line is parallel to the source normal.
pub fn pair_features(p1: &Vector3<f64>, n1: &Vector3<f64>, p2: &Vector3<f64>, n2: &Vector3<f64>) -> Option<[f64; 3]> {
    let mut dp = p2 - p1;
    let dist = dp.norm();
    if dist == 0.0 {
        return None;
    }
    let a1 = n1.dot(&dp) / dist;
    let a2 = n2.dot(&dp) / dist;
    let (src, tgt, f3) = if a1.abs().acos() > a2.abs().acos() {
        dp = -dp;
        (n2, n1, -a2)
    } else {
        (n1, n2, a1)
    };
    let v = dp.cross(src);
    let vn = v.norm();
    if vn == 0.0 {
        return None;
    }
    let v = v / vn;
    let w = src.cross(&v);
    let f2 = v.dot(tgt);
    let f1 = w.dot(tgt).atan2(src.dot(tgt));
    Some([f1, f2, f3])
}

fn bin(value: f64, lo: f64, hi: f64) -> usize {
    let b = ((value - lo) / (hi - lo) * FPFH_BINS as f64).floor();
    b.clamp(0.0, (FPFH_BINS - 1) as f64) as usize
}

fn normalize_blocks(h: &mut Descriptor) {
    for block in h.chunks_mut(FPFH_BINS) {
        let s: f64 = block.iter().sum();
        if s > 0.0 {
            block.iter_mut().for_each(|v| *v /= s);
        }
    }
}

/// Lazily computes descriptors for chosen points of one cloud.
pub struct FpfhEstimator<'a> {
    cloud: &'a PointCloud,
    normals: &'a nalgebra::Matrix3xX<f64>,
    tree: ImmutableKdTree<f64, 3>,
    radius: f64,
    max_neighbors: Option<usize>,
    neighbors: HashMap<usize, Vec<usize>>,
    spfh: HashMap<usize, Descriptor>,
}

impl<'a> FpfhEstimator<'a> {
    pub fn new(cloud: &'a PointCloud, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidInput(format!("FPFH radius must be positive, got {radius}")));
        }
        let normals = cloud
            .normals
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("FPFH needs normals".into()))?;
        Ok(FpfhEstimator {
            cloud,
            normals,
            tree: cloud.kd_tree(),
            radius,
            max_neighbors: None,
            neighbors: HashMap::new(),
            spfh: HashMap::new(),
        })
    }

    /// Keeps only the `n` nearest points inside the radius.
    pub fn with_max_neighbors(mut self, n: usize) -> Self {
        self.max_neighbors = Some(n.max(1));
        self
    }

    pub fn cloud(&self) -> &PointCloud {
        self.cloud
    }

    /// Closest cloud point to `q` as `(index, distance)`.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        nearest(&self.tree, q)
    }

    fn neighbors(&mut self, i: usize) -> &[usize] {
        let (tree, radius, cloud, max) = (&self.tree, self.radius, self.cloud, self.max_neighbors);
        self.neighbors.entry(i).or_insert_with(|| {
            let q = cloud.point(i);
            // the point itself is among the nearest
            match max {
                Some(n) => nearest_within(tree, &q, radius, n + 1),
                None => within(tree, &q, radius),
            }
            .into_iter()
            .filter(|&j| j != i)
            .collect()
        })
    }

    fn spfh(&mut self, i: usize) -> Descriptor {
        if let Some(h) = self.spfh.get(&i) {
            return *h;
        }
        let nb = self.neighbors(i).to_vec();
        let p = self.cloud.point(i);
        let n = self.normals.column(i).into_owned();
        let mut h = [0.0; FPFH_LEN];
        for j in nb {
            let q = self.cloud.point(j);
            let m = self.normals.column(j).into_owned();
            if let Some([f1, f2, f3]) = pair_features(&p, &n, &q, &m) {
                h[bin(f1, -std::f64::consts::PI, std::f64::consts::PI)] += 1.0;
                h[FPFH_BINS + bin(f2, -1.0, 1.0)] += 1.0;
                h[2 * FPFH_BINS + bin(f3, -1.0, 1.0)] += 1.0;
            }
        }
        normalize_blocks(&mut h);
        self.spfh.insert(i, h);
        h
    }

    /// Own histogram plus neighbor histograms weighted by inverse distance;
    /// `None` for a point with no neighbors.
    pub fn descriptor(&mut self, i: usize) -> Option<Descriptor> {
        let nb = self.neighbors(i).to_vec();
        if nb.is_empty() {
            return None;
        }
        let mut out = self.spfh(i);
        let p = self.cloud.point(i);
        let mut acc = [0.0; FPFH_LEN];
        let mut used = 0usize;
        for j in nb {
            let d = (self.cloud.point(j) - p).norm();
            if d == 0.0 {
                continue;
            }
            let h = self.spfh(j);
            for (a, v) in acc.iter_mut().zip(h.iter()) {
                *a += v / d;
            }
            used += 1;
        }
        if used > 0 {
            for (o, a) in out.iter_mut().zip(acc.iter()) {
                *o += a / used as f64;
            }
        }
        normalize_blocks(&mut out);
        Some(out)
    }
}

/// Descriptors for every point of `cloud`.
pub fn fpfh(cloud: &PointCloud, radius: f64) -> Result<FpfhResult> {
    let mut est = FpfhEstimator::new(cloud, radius)?;
    let mut descriptors = Vec::with_capacity(cloud.len());
    let mut isolated = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        match est.descriptor(i) {
            Some(d) => {
                descriptors.push(d);
                isolated.push(false);
            }
            None => {
                descriptors.push([0.0; FPFH_LEN]);
                isolated.push(true);
            }
        }
    }
    Ok(FpfhResult { descriptors, isolated })
}

pub fn descriptor_distance(a: &Descriptor, b: &Descriptor) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::{so3_exp, RigidTransform};
    use nalgebra::Matrix3xX;

    fn plane() -> PointCloud {
        let mut pts = Vec::new();
        for y in 0..9 {
            for x in 0..9 {
                pts.push(Vector3::new(x as f64 * 0.01, y as f64 * 0.01, 1.0));
            }
        }
        let n = pts.len();
        PointCloud::new(
            Matrix3xX::from_columns(&pts),
            Some(Matrix3xX::from_fn(n, |r, _| if r == 2 { -1.0 } else { 0.0 })),
        )
        .unwrap()
    }

    /// Three faces of a cube meeting at a corner, with face normals.
    pub(crate) fn corner() -> PointCloud {
        let mut pts = Vec::new();
        let mut nrm = Vec::new();
        for a in 0..8 {
            for b in 0..8 {
                let (s, t) = (a as f64 * 0.013 + 0.004, b as f64 * 0.011 + 0.003);
                pts.push(Vector3::new(0.0, s, t));
                nrm.push(Vector3::new(1.0, 0.0, 0.0));
                pts.push(Vector3::new(s, 0.0, t));
                nrm.push(Vector3::new(0.0, 1.0, 0.0));
                pts.push(Vector3::new(s, t, 0.0));
                nrm.push(Vector3::new(0.0, 0.0, 1.0));
            }
        }
        PointCloud::new(Matrix3xX::from_columns(&pts), Some(Matrix3xX::from_columns(&nrm))).unwrap()
    }

    #[test]
    fn planar_interior_descriptors_agree() {
        let r = fpfh(&plane(), 0.025).unwrap();
        let interior: Vec<usize> = (0..81).filter(|i| (2..7).contains(&(i % 9)) && (2..7).contains(&(i / 9))).collect();
        for &i in &interior {
            assert!(descriptor_distance(&r.descriptors[i], &r.descriptors[interior[0]]) < 1e-6);
        }
        assert!(r.isolated.iter().all(|f| !f));
    }

    #[test]
    fn rigid_motion_leaves_descriptors_unchanged() {
        let c = corner();
        let t = RigidTransform::new(so3_exp(&Vector3::new(0.3, -1.1, 0.6)), Vector3::new(0.5, -2.0, 3.0));
        let moved = PointCloud::new(t.apply_all(&c.points), Some(t.rotation.matrix() * c.normals.as_ref().unwrap())).unwrap();
        let a = fpfh(&c, 0.03).unwrap();
        let b = fpfh(&moved, 0.03).unwrap();
        for (x, y) in a.descriptors.iter().zip(&b.descriptors) {
            assert!(descriptor_distance(x, y) < 1e-6);
        }
    }

    #[test]
    fn isolated_point_is_flagged() {
        let c = PointCloud::new(
            Matrix3xX::from_columns(&[Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)]),
            Some(Matrix3xX::from_fn(2, |r, _| if r == 2 { 1.0 } else { 0.0 })),
        )
        .unwrap();
        let r = fpfh(&c, 0.1).unwrap();
        assert_eq!(r.isolated, vec![true, true]);
        assert_eq!(r.descriptors[0], [0.0; FPFH_LEN]);
    }

    #[test]
    fn blocks_are_l1_normalized() {
        let r = fpfh(&corner(), 0.03).unwrap();
        for d in &r.descriptors {
            for block in d.chunks(FPFH_BINS) {
                assert!((block.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orthogonal_normals_across_the_line() {
        let f = pair_features(
            &Vector3::zeros(),
            &Vector3::new(0.0, 0.0, 1.0),
            &Vector3::new(0.1, 0.0, 0.0),
            &Vector3::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        assert!(f[0].abs() < 1e-12);
        assert!((f[1] + 1.0).abs() < 1e-12);
        assert!(f[2].abs() < 1e-12);
    }

    #[test]
    fn line_along_normal_is_degenerate() {
        let n = Vector3::new(1.0, 0.0, 0.0);
        assert!(pair_features(&Vector3::zeros(), &n, &Vector3::new(0.1, 0.0, 0.0), &n).is_none());
    }

    #[test]
    fn missing_normals_are_rejected() {
        let c = PointCloud::new(Matrix3xX::zeros(3), None).unwrap();
        assert!(fpfh(&c, 0.1).is_err());
        assert!(fpfh(&corner(), 0.0).is_err());
    }
}
