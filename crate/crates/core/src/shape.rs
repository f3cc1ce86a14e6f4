//! Deformable keypoint shape model: mean shape plus linear PCA modes.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector, Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative eigenvalue floor below which a PCA direction carries no variance.
const ZERO_VARIANCE_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeBasis {
    pub b0: Matrix3xX<f64>,
    pub modes: Vec<Matrix3xX<f64>>,
    pub eigenvalues: Vec<f64>,
    pub keypoint_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCoefficients(pub DVector<f64>);

impl ShapeCoefficients {
    pub fn zeros(k: usize) -> Self {
        ShapeCoefficients(DVector::zeros(k))
    }

    pub fn from_slice(c: &[f64]) -> Self {
        ShapeCoefficients(DVector::from_column_slice(c))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// How many principal components to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComponentSelection {
    /// Smallest count whose cumulative explained variance exceeds the fraction.
    VarianceTarget(f64),
    Count(usize),
}

impl Default for ComponentSelection {
    fn default() -> Self {
        ComponentSelection::VarianceTarget(0.95)
    }
}

/// Named 3D keypoints with optional unit surface normals.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints3D {
    pub points: Matrix3xX<f64>,
    pub names: Vec<String>,
    pub normals: Option<Matrix3xX<f64>>,
}

impl Keypoints3D {
    pub fn new(points: Matrix3xX<f64>, names: Vec<String>, normals: Option<Matrix3xX<f64>>) -> Result<Self> {
        if names.len() != points.ncols() {
            return Err(Error::Dimension(format!(
                "{} keypoint names for {} points",
                names.len(),
                points.ncols()
            )));
        }
        check_unique(&names)?;
        if let Some(n) = &normals {
            if n.ncols() != points.ncols() {
                return Err(Error::Dimension("normals/points count mismatch".into()));
            }
            for (i, c) in n.column_iter().enumerate() {
                if (c.norm() - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidInput(format!("normal of keypoint '{}' is not unit length", names[i])));
                }
            }
        }
        Ok(Keypoints3D { points, names, normals })
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }

    pub fn normal(&self, i: usize) -> Option<Vector3<f64>> {
        self.normals.as_ref().map(|n| n.column(i).into_owned())
    }
}

fn check_unique(names: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate keypoint name '{n}'")));
        }
    }
    Ok(())
}

/// Smallest `k` whose cumulative share of the eigenvalue sum exceeds `threshold`.
pub fn select_components(eigenvalues: &[f64], threshold: f64) -> usize {
    let total: f64 = eigenvalues.iter().sum();
    if !(total > 0.0) {
        return 0;
    }
    let mut cumulative = 0.0;
    for (i, e) in eigenvalues.iter().enumerate() {
        cumulative += e;
        if cumulative / total > threshold {
            return i + 1;
        }
    }
    eigenvalues.len()
}

fn vectorize(m: &Matrix3xX<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

fn unvectorize(v: &[f64]) -> Matrix3xX<f64> {
    Matrix3xX::from_column_slice(v)
}

fn fix_sign(mode: &mut Matrix3xX<f64>) {
    let mut best = 0;
    for (i, v) in mode.iter().enumerate() {
        if v.abs() > mode[best].abs() {
            best = i;
        }
    }
    if mode[best] < 0.0 {
        mode.neg_mut();
    }
}

/// Mean-centered PCA over vectorized keypoint sets sharing one object frame.
pub fn build_pca_basis(instances: &[Matrix3xX<f64>], keypoint_names: Vec<String>, selection: ComponentSelection) -> Result<ShapeBasis> {
    if instances.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "PCA needs at least 2 instances, got {}",
            instances.len()
        )));
    }
    let p = instances[0].ncols();
    if let Some(bad) = instances.iter().position(|m| m.ncols() != p) {
        return Err(Error::Dimension(format!(
            "instance {bad} has {} keypoints, expected {p}",
            instances[bad].ncols()
        )));
    }
    if keypoint_names.len() != p {
        return Err(Error::Dimension(format!("{} names for {p} keypoints", keypoint_names.len())));
    }
    check_unique(&keypoint_names)?;

    let n = instances.len();
    let mut b0 = Matrix3xX::zeros(p);
    for m in instances {
        b0 += m;
    }
    b0 /= n as f64;

    let dim = 3 * p;
    let max_modes = (n - 1).min(dim);
    // tall layout: one centered instance per column
    let data = DMatrix::from_fn(dim, n, |r, c| instances[c].as_slice()[r] - b0.as_slice()[r]);
    let cov = &data * data.transpose() / (n as f64 - 1.0);
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let data_scale = instances.iter().map(|m| m.norm_squared()).sum::<f64>() / (n as f64 - 1.0);
    let floor = ZERO_VARIANCE_RTOL * eig.eigenvalues.iter().cloned().fold(data_scale, f64::max);

    let eigen_all: Vec<f64> = order[..max_modes]
        .iter()
        .map(|&i| {
            let e = eig.eigenvalues[i];
            if e <= floor {
                0.0
            } else {
                e
            }
        })
        .collect();

    let k = match selection {
        ComponentSelection::VarianceTarget(t) => {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidInput(format!("variance target {t} outside [0, 1]")));
            }
            let nonzero: Vec<f64> = eigen_all.iter().cloned().filter(|e| *e > 0.0).collect();
            select_components(&nonzero, t)
        }
        ComponentSelection::Count(k) => {
            if k > max_modes {
                return Err(Error::InvalidInput(format!(
                    "requested {k} modes but {n} instances of {p} keypoints support at most {max_modes}"
                )));
            }
            k
        }
    };

    let mut modes = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let col: Vec<f64> = eig.eigenvectors.column(idx).iter().cloned().collect();
        let mut mode = unvectorize(&col);
        mode /= mode.norm();
        fix_sign(&mut mode);
        modes.push(mode);
    }
    Ok(ShapeBasis {
        b0,
        modes,
        eigenvalues: eigen_all[..k].to_vec(),
        keypoint_names,
    })
}

impl ShapeBasis {
    /// A basis with no deformation modes: the instance-level model.
    pub fn rigid(points: Matrix3xX<f64>, keypoint_names: Vec<String>) -> Result<Self> {
        if keypoint_names.len() != points.ncols() {
            return Err(Error::Dimension("names/points count mismatch".into()));
        }
        check_unique(&keypoint_names)?;
        Ok(ShapeBasis {
            b0: points,
            modes: Vec::new(),
            eigenvalues: Vec::new(),
            keypoint_names,
        })
    }

    pub fn num_keypoints(&self) -> usize {
        self.b0.ncols()
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    /// `b0 + Σ c_i · mode_i`.
    pub fn instantiate(&self, c: &ShapeCoefficients) -> Result<Matrix3xX<f64>> {
        if c.len() != self.modes.len() {
            return Err(Error::Dimension(format!("{} coefficients for {} modes", c.len(), self.modes.len())));
        }
        let mut s = self.b0.clone();
        for (ci, mode) in c.0.iter().zip(&self.modes) {
            s += mode * *ci;
        }
        Ok(s)
    }

    /// Orthogonal projection of a shape onto the modes.
    pub fn coefficients_of(&self, shape: &Matrix3xX<f64>) -> Result<ShapeCoefficients> {
        if shape.ncols() != self.num_keypoints() {
            return Err(Error::Dimension("shape/basis keypoint count mismatch".into()));
        }
        let d = vectorize(&(shape - &self.b0));
        Ok(ShapeCoefficients(DVector::from_iterator(
            self.modes.len(),
            self.modes.iter().map(|m| vectorize(m).dot(&d)),
        )))
    }

    pub fn explained_variance(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().sum();
        let mut acc = 0.0;
        self.eigenvalues
            .iter()
            .map(|e| {
                acc += e;
                if total > 0.0 {
                    acc / total
                } else {
                    1.0
                }
            })
            .collect()
    }

    pub fn to_json(&self) -> BasisJson {
        BasisJson {
            names: self.keypoint_names.clone(),
            b0: rows_of(&self.b0),
            modes: self.modes.iter().map(rows_of).collect(),
            eigenvalues: self.eigenvalues.clone(),
        }
    }

    pub fn from_json(j: &BasisJson) -> Result<Self> {
        let b0 = from_rows(&j.b0, "b0")?;
        let p = b0.ncols();
        let modes = j
            .modes
            .iter()
            .enumerate()
            .map(|(i, m)| from_rows(m, &format!("modes[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        if modes.iter().any(|m| m.ncols() != p) || j.names.len() != p {
            return Err(Error::Dimension("basis JSON keypoint counts disagree".into()));
        }
        if j.eigenvalues.len() != modes.len() {
            return Err(Error::Dimension("basis JSON eigenvalue count != mode count".into()));
        }
        check_unique(&j.names)?;
        Ok(ShapeBasis {
            b0,
            modes,
            eigenvalues: j.eigenvalues.clone(),
            keypoint_names: j.names.clone(),
        })
    }
}

/// On-disk form of [`ShapeBasis`]; matrices are stored as three rows of `p`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisJson {
    pub names: Vec<String>,
    pub b0: Vec<Vec<f64>>,
    pub modes: Vec<Vec<Vec<f64>>>,
    pub eigenvalues: Vec<f64>,
}

pub(crate) fn rows_of(m: &Matrix3xX<f64>) -> Vec<Vec<f64>> {
    (0..3).map(|r| m.row(r).iter().cloned().collect()).collect()
}

pub(crate) fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<Matrix3xX<f64>> {
    if rows.len() != 3 {
        return Err(Error::parse(what, format!("expected 3 rows, got {}", rows.len())));
    }
    let p = rows[0].len();
    if rows.iter().any(|r| r.len() != p) {
        return Err(Error::parse(what, "ragged rows"));
    }
    Ok(Matrix3xX::from_fn(p, |r, c| rows[r][c]))
}
