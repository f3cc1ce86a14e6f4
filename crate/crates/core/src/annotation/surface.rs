//! Triangle meshes and ASCII PLY.

use std::fmt::Write as _;

use nalgebra::{Matrix3xX, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceModel {
    pub vertices: Matrix3xX<f64>,
    pub triangles: Vec<[usize; 3]>,
    pub normals: Matrix3xX<f64>,
}

impl SurfaceModel {
    /// Builds a model; missing normals are computed as area-weighted averages
    /// of the incident face normals.
    pub fn new(vertices: Matrix3xX<f64>, triangles: Vec<[usize; 3]>, normals: Option<Matrix3xX<f64>>) -> Result<Self> {
        let n = vertices.ncols();
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite mesh vertex".into()));
        }
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidInput(format!("triangle {t:?} indexes past {n} vertices")));
        }
        let normals = match normals {
            Some(nm) => {
                if nm.ncols() != n {
                    return Err(Error::Dimension("normals/vertices count mismatch".into()));
                }
                if let Some(i) = nm.column_iter().position(|c| (c.norm() - 1.0).abs() > 1e-6) {
                    return Err(Error::InvalidInput(format!("normal {i} is not unit length")));
                }
                nm
            }
            None => vertex_normals(&vertices, &triangles),
        };
        Ok(SurfaceModel {
            vertices,
            triangles,
            normals,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.ncols()
    }

    pub fn from_ply(text: &str) -> Result<Self> {
        parse_ply(text)
    }

    pub fn to_ply(&self) -> String {
        let mut out = String::new();
        out.push_str("ply\nformat ascii 1.0\n");
        let _ = writeln!(out, "element vertex {}", self.num_vertices());
        for p in ["x", "y", "z", "nx", "ny", "nz"] {
            let _ = writeln!(out, "property double {p}");
        }
        let _ = writeln!(out, "element face {}", self.triangles.len());
        out.push_str("property list uchar int vertex_indices\nend_header\n");
        for (v, n) in self.vertices.column_iter().zip(self.normals.column_iter()) {
            let _ = writeln!(out, "{} {} {} {} {} {}", v.x, v.y, v.z, n.x, n.y, n.z);
        }
        for t in &self.triangles {
            let _ = writeln!(out, "3 {} {} {}", t[0], t[1], t[2]);
        }
        out
    }
}

fn vertex_normals(vertices: &Matrix3xX<f64>, triangles: &[[usize; 3]]) -> Matrix3xX<f64> {
    let mut acc = Matrix3xX::zeros(vertices.ncols());
    for t in triangles {
        let a = vertices.column(t[0]);
        let b = vertices.column(t[1]);
        let c = vertices.column(t[2]);
        // cross product length is twice the area
        let n = (b - a).cross(&(c - a));
        for &i in t {
            let mut col = acc.column_mut(i);
            col += n;
        }
    }
    for mut col in acc.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        } else {
            col.copy_from(&Vector3::z());
        }
    }
    acc
}

struct Element {
    name: String,
    count: usize,
    props: Vec<String>,
}

fn parse_ply(text: &str) -> Result<SurfaceModel> {
    let err = |m: String| Error::parse("PLY", m);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(err("missing 'ply' magic".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let line = lines.next().ok_or_else(|| err("header not terminated".into()))?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => {}
            ["format", f, ..] => return Err(err(format!("unsupported format '{f}'"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| err(format!("bad element count '{count}'")))?,
                props: Vec::new(),
            }),
            ["property", "list", _, _, name] | ["property", _, name] => elements
                .last_mut()
                .ok_or_else(|| err("property before element".into()))?
                .props
                .push(name.to_string()),
            _ => return Err(err(format!("unrecognized header line '{line}'"))),
        }
    }

    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut has_normals = false;
    let mut triangles = Vec::new();
    for el in &elements {
        match el.name.as_str() {
            "vertex" => {
                let idx = |p: &str| el.props.iter().position(|q| q == p);
                let xyz = [idx("x"), idx("y"), idx("z")];
                let nxyz = [idx("nx"), idx("ny"), idx("nz")];
                let [Some(x), Some(y), Some(z)] = xyz else {
                    return Err(err("vertex element lacks x/y/z".into()));
                };
                has_normals = nxyz.iter().all(Option::is_some);
                for _ in 0..el.count {
                    let line = lines.next().ok_or_else(|| err("truncated vertex list".into()))?;
                    let vals: Vec<f64> = line
                        .split_whitespace()
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| err(format!("bad vertex line '{line}': {e}")))?;
                    if vals.len() < el.props.len() {
                        return Err(err(format!("short vertex line '{line}'")));
                    }
                    vertices.push(Vector3::new(vals[x], vals[y], vals[z]));
                    if has_normals {
                        let n = Vector3::new(vals[nxyz[0].unwrap_or(0)], vals[nxyz[1].unwrap_or(0)], vals[nxyz[2].unwrap_or(0)]);
                        normals.push(n.normalize());
                    }
                }
            }
            "face" => {
                for _ in 0..el.count {
                    let line = lines.next().ok_or_else(|| err("truncated face list".into()))?;
                    let idx: Vec<usize> = line
                        .split_whitespace()
                        .map(|t| t.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| err(format!("bad face line '{line}': {e}")))?;
                    let Some((&n, rest)) = idx.split_first() else {
                        return Err(err("empty face line".into()));
                    };
                    if n < 3 || rest.len() < n {
                        return Err(err(format!("bad face line '{line}'")));
                    }
                    for j in 1..n - 1 {
                        triangles.push([rest[0], rest[j], rest[j + 1]]);
                    }
                }
            }
            _ => {
                for _ in 0..el.count {
                    lines.next();
                }
            }
        }
    }
    let vertices = super::cloud::columns(&vertices);
    let normals = has_normals.then(|| super::cloud::columns(&normals));
    SurfaceModel::new(vertices, triangles, normals)
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUAD: &str = "ply
format ascii 1.0
comment two triangles
element vertex 4
property float x
property float y
property float z
property uchar red
element face 1
property list uchar int vertex_indices
end_header
0 0 0 255
1 0 0 255
1 1 0 255
0 1 0 255
4 0 1 2 3
";

    #[test]
    fn quad_is_fan_triangulated() {
        let m = SurfaceModel::from_ply(QUAD).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
        for n in m.normals.column_iter() {
            assert!((n - Vector3::z()).norm() < 1e-12);
        }
    }

    #[test]
    fn ply_round_trip_is_lossless() {
        let v = Matrix3xX::from_columns(&[
            Vector3::new(0.1, -0.2, 1.0 / 3.0),
            Vector3::new(1.0, 0.0, 0.7),
            Vector3::new(0.0, 1e-7, 2.5),
        ]);
        let m = SurfaceModel::new(v, vec![[0, 1, 2]], None).unwrap();
        let back = SurfaceModel::from_ply(&m.to_ply()).unwrap();
        assert_eq!(back.vertices, m.vertices);
        assert_eq!(back.triangles, m.triangles);
        assert!((back.normals - m.normals).amax() < 1e-15);
    }

    #[test]
    fn bad_index_is_rejected() {
        let v = Matrix3xX::zeros(3);
        assert!(SurfaceModel::new(v, vec![[0, 1, 3]], None).is_err());
    }

    #[test]
    fn binary_format_is_rejected() {
        let text = "ply\nformat binary_little_endian 1.0\nend_header\n";
        assert!(matches!(SurfaceModel::from_ply(text), Err(Error::Parse { .. })));
    }
}
