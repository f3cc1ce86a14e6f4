//! Point clouds back-projected from depth images.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix3, Matrix3xX, Vector3};

use super::depth::DepthImage;
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;

/// Neighborhood half-width for normal estimation (a 5x5 window).
const NORMAL_HALF_WINDOW: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Matrix3xX<f64>,
    pub normals: Option<Matrix3xX<f64>>,
}

impl PointCloud {
    pub fn new(points: Matrix3xX<f64>, normals: Option<Matrix3xX<f64>>) -> Result<Self> {
        if let Some(n) = &normals {
            if n.ncols() != points.ncols() {
                return Err(Error::Dimension("normals/points count mismatch".into()));
            }
        }
        Ok(PointCloud { points, normals })
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }

    pub fn point(&self, i: usize) -> Vector3<f64> {
        self.points.column(i).into_owned()
    }

    pub fn normal(&self, i: usize) -> Option<Vector3<f64>> {
        self.normals.as_ref().map(|n| n.column(i).into_owned())
    }

    pub fn select(&self, idx: &[usize]) -> PointCloud {
        let pick = |m: &Matrix3xX<f64>| Matrix3xX::from_fn(idx.len(), |r, c| m[(r, idx[c])]);
        PointCloud {
            points: pick(&self.points),
            normals: self.normals.as_ref().map(pick),
        }
    }

    pub(crate) fn kd_tree(&self) -> ImmutableKdTree<f64, 3> {
        let pts: Vec<[f64; 3]> = self.points.column_iter().map(|c| [c.x, c.y, c.z]).collect();
        ImmutableKdTree::new_from_slice(&pts)
    }
}

/// Stacks points as columns; empty input gives a 3x0 matrix.
pub(crate) fn columns(pts: &[Vector3<f64>]) -> Matrix3xX<f64> {
    Matrix3xX::from_fn(pts.len(), |r, c| pts[c][r])
}

/// Nearest neighbor `(index, distance)`; `None` for an empty tree.
pub(crate) fn nearest(tree: &ImmutableKdTree<f64, 3>, q: &Vector3<f64>) -> Option<(usize, f64)> {
    if tree.size() == 0 {
        return None;
    }
    let nn = tree.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z]);
    Some((nn.item as usize, nn.distance.sqrt()))
}

/// Indices within `radius` of `q`, sorted ascending.
pub(crate) fn within(tree: &ImmutableKdTree<f64, 3>, q: &Vector3<f64>, radius: f64) -> Vec<usize> {
    if tree.size() == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = tree
        .within_unsorted::<SquaredEuclidean>(&[q.x, q.y, q.z], radius * radius)
        .into_iter()
        .map(|n| n.item as usize)
        .collect();
    idx.sort_unstable();
    idx
}

/// Up to `max` indices within `radius` of `q`, nearest first, returned
/// sorted ascending.
pub(crate) fn nearest_within(tree: &ImmutableKdTree<f64, 3>, q: &Vector3<f64>, radius: f64, max: usize) -> Vec<usize> {
    let Some(max) = std::num::NonZero::new(max) else {
        return Vec::new();
    };
    if tree.size() == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = tree
        .nearest_n_within::<SquaredEuclidean>(&[q.x, q.y, q.z], radius * radius, max, true)
        .into_iter()
        .map(|n| n.item as usize)
        .collect();
    idx.sort_unstable();
    idx
}

/// A back-projected depth image that remembers each point's pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthCloud {
    pub cloud: PointCloud,
    pub pixels: Vec<(usize, usize)>,
    /// Point index per pixel, row-major.
    pub index: Vec<Option<usize>>,
    pub width: usize,
}

impl DepthCloud {
    pub fn at_pixel(&self, x: usize, y: usize) -> Option<usize> {
        self.index.get(y * self.width + x).copied().flatten()
    }
}

/// Back-projects every valid pixel, without normals.
pub fn back_project(depth: &DepthImage, k: &CameraIntrinsics) -> DepthCloud {
    let (w, h) = (depth.width, depth.height);
    let mut index = vec![None; w * h];
    let mut pts = Vec::new();
    let mut pixels = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let d = depth.get(x, y);
            if d > 0.0 {
                index[y * w + x] = Some(pts.len());
                pts.push(k.unproject(x as f64, y as f64, d));
                pixels.push((x, y));
            }
        }
    }
    DepthCloud {
        cloud: PointCloud {
            points: columns(&pts),
            normals: None,
        },
        pixels,
        index,
        width: w,
    }
}

/// Back-projects every valid pixel and estimates normals for all of them.
pub fn back_project_with_normals(depth: &DepthImage, k: &CameraIntrinsics, edge_gap: f64) -> DepthCloud {
    let mut dc = back_project(depth, k);
    let all: Vec<usize> = (0..dc.cloud.len()).collect();
    dc.cloud.normals = Some(dc.normals_for(&all, edge_gap));
    dc
}

impl DepthCloud {
    /// Normals at the given points: smallest eigenvector of the covariance
    /// over the 5x5 pixel neighborhood (neighbors further than `edge_gap` in
    /// depth are left out), oriented toward the camera.
    pub fn normals_for(&self, idx: &[usize], edge_gap: f64) -> Matrix3xX<f64> {
        let w = self.width;
        let h = self.index.len() / w.max(1);
        let pts = &self.cloud.points;
        let mut normals = Vec::with_capacity(idx.len());
        let mut nb = Vec::with_capacity(25);
        for &i in idx {
            let (x, y) = self.pixels[i];
            let p: Vector3<f64> = pts.column(i).into_owned();
            nb.clear();
            for yy in y.saturating_sub(NORMAL_HALF_WINDOW)..=(y + NORMAL_HALF_WINDOW).min(h - 1) {
                for xx in x.saturating_sub(NORMAL_HALF_WINDOW)..=(x + NORMAL_HALF_WINDOW).min(w - 1) {
                    if let Some(j) = self.index[yy * w + xx] {
                        let q: Vector3<f64> = pts.column(j).into_owned();
                        if (q.z - p.z).abs() <= edge_gap {
                            nb.push(q);
                        }
                    }
                }
            }
            normals.push(estimate_normal(&nb, &p));
        }
        columns(&normals)
    }
}

/// Plane normal of a neighborhood, oriented toward the camera at the origin;
/// falls back to the reversed viewing ray with fewer than three neighbors.
pub(crate) fn estimate_normal(nb: &[Vector3<f64>], p: &Vector3<f64>) -> Vector3<f64> {
    let toward = -p.normalize();
    if nb.len() < 3 {
        return toward;
    }
    let mean = nb.iter().sum::<Vector3<f64>>() / nb.len() as f64;
    let mut cov = Matrix3::zeros();
    for q in nb {
        let d = q - mean;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let i = eig.eigenvalues.imin();
    let n: Vector3<f64> = eig.eigenvectors.column(i).into_owned();
    if !(n.norm() > 0.0) || !n.iter().all(|v| v.is_finite()) {
        return toward;
    }
    let n = n.normalize();
    if n.dot(&toward) < 0.0 {
        -n
    } else {
        n
    }
}

/// Axis-aligned bounding box of the keypoints grown by `dilation` on every
/// face; points and keypoints share one frame.
pub fn crop_by_keypoint_volume(cloud: &PointCloud, keypoints: &Matrix3xX<f64>, dilation: f64) -> Result<PointCloud> {
    Ok(cloud.select(&crop_indices(&cloud.points, keypoints, dilation)?))
}

/// Indices of the points kept by [`crop_by_keypoint_volume`].
pub fn crop_indices(points: &Matrix3xX<f64>, keypoints: &Matrix3xX<f64>, dilation: f64) -> Result<Vec<usize>> {
    if keypoints.ncols() == 0 {
        return Err(Error::InvalidInput("cropping needs at least one keypoint".into()));
    }
    let lo = Vector3::from_fn(|r, _| keypoints.row(r).min() - dilation);
    let hi = Vector3::from_fn(|r, _| keypoints.row(r).max() + dilation);
    let idx: Vec<usize> = points
        .column_iter()
        .enumerate()
        .filter(|(_, p)| (0..3).all(|r| p[r] >= lo[r] && p[r] <= hi[r]))
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(Error::EmptyCrop);
    }
    Ok(idx)
}

/// Diagonal length of the keypoints' bounding box.
pub fn keypoint_diagonal(keypoints: &Matrix3xX<f64>) -> f64 {
    if keypoints.ncols() == 0 {
        return 0.0;
    }
    Vector3::from_fn(|r, _| keypoints.row(r).max() - keypoints.row(r).min()).norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..=20 {
            pts.push(Vector3::new(i as f64 * 0.1 - 0.5, 0.5, 0.5));
        }
        PointCloud::new(Matrix3xX::from_columns(&pts), None).unwrap()
    }

    fn unit_cube_keypoints() -> Matrix3xX<f64> {
        Matrix3xX::from_columns(&[Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0)])
    }

    #[test]
    fn crop_without_dilation_keeps_cube_points() {
        let c = crop_by_keypoint_volume(&grid(), &unit_cube_keypoints(), 0.0).unwrap();
        assert!(c.points.row(0).iter().all(|&x| (-1e-12..=1.0 + 1e-12).contains(&x)));
        assert_eq!(c.len(), 11);
    }

    #[test]
    fn dilation_keeps_nearby_points() {
        let cloud = PointCloud::new(Matrix3xX::from_columns(&[Vector3::new(1.05, 0.5, 0.5)]), None).unwrap();
        assert!(matches!(
            crop_by_keypoint_volume(&cloud, &unit_cube_keypoints(), 0.0),
            Err(Error::EmptyCrop)
        ));
        assert_eq!(crop_by_keypoint_volume(&cloud, &unit_cube_keypoints(), 0.1).unwrap().len(), 1);
    }

    #[test]
    fn large_dilation_keeps_everything() {
        let g = grid();
        assert_eq!(crop_by_keypoint_volume(&g, &unit_cube_keypoints(), 100.0).unwrap(), g);
    }

    #[test]
    fn plane_normals_face_camera() {
        let k = CameraIntrinsics::new(50.0, 50.0, 10.0, 10.0, 21, 21).unwrap();
        // plane z = 2 + 0.5 x, seen from the origin
        let mut depth = DepthImage::zeros(21, 21);
        for y in 0..21 {
            for x in 0..21 {
                let rx = (x as f64 - 10.0) / 50.0;
                depth.set(x, y, 2.0 / (1.0 - 0.5 * rx));
            }
        }
        let dc = back_project_with_normals(&depth, &k, 0.05);
        let expected = Vector3::new(0.5, 0.0, -1.0).normalize();
        for n in dc.cloud.normals.as_ref().unwrap().column_iter() {
            assert!((n - expected).norm() < 1e-9, "{n:?}");
        }
        assert_eq!(dc.at_pixel(3, 4), Some(4 * 21 + 3));
    }

    #[test]
    fn nearest_and_within_queries() {
        let g = grid();
        let tree = g.kd_tree();
        let (i, d) = nearest(&tree, &Vector3::new(0.01, 0.5, 0.5)).unwrap();
        assert_eq!(i, 5);
        assert!((d - 0.01).abs() < 1e-12);
        assert_eq!(within(&tree, &Vector3::new(0.0, 0.5, 0.5), 0.15), vec![4, 5, 6]);
        assert_eq!(nearest_within(&tree, &Vector3::new(0.01, 0.5, 0.5), 0.15, 2), vec![5, 6]);
        assert!(nearest_within(&tree, &Vector3::new(0.0, 0.5, 0.5), 0.15, 0).is_empty());
    }
}
