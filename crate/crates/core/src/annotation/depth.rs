//! Depth images, their file formats, and z-buffer rendering of meshes.
//!
//! PFM: `Pf` header, negative scale for little-endian, rows stored bottom to
//! top, float32 meters. PGM: binary `P5`, 16-bit big-endian millimeters.

use nalgebra::{Vector2, Vector3};

use super::surface::SurfaceModel;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidTransform};

const NEAR: f64 = 1e-6;

/// Row-major depths in meters; `0` marks a missing measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        DepthImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} depth values for a {width}x{height} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!("invalid depth value {v}")));
        }
        Ok(DepthImage { width, height, data })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    /// Depth at the pixel containing `(u, v)`; `None` off-image or missing.
    pub fn at(&self, u: f64, v: f64) -> Option<f64> {
        let (x, y) = self.pixel_of(u, v)?;
        let d = self.get(x, y);
        (d > 0.0).then_some(d)
    }

    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (x, y) = (u.round(), v.round());
        if x >= 0.0 && y >= 0.0 && (x as usize) < self.width && (y as usize) < self.height {
            Some((x as usize, y as usize))
        } else {
            None
        }
    }

    pub fn matches(&self, k: &CameraIntrinsics) -> bool {
        self.width == k.width as usize && self.height == k.height as usize
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0.0).count()
    }

    pub fn to_pfm(&self) -> Vec<u8> {
        let mut out = format!("Pf\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                out.extend_from_slice(&(self.get(x, y) as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_pfm(bytes: &[u8]) -> Result<Self> {
        let (tokens, body) = split_header(bytes, 4, "PFM")?;
        if tokens[0] != "Pf" {
            return Err(Error::parse("PFM", format!("unsupported type '{}'", tokens[0])));
        }
        let (width, height) = dims(&tokens, "PFM")?;
        let scale: f64 = tokens[3].parse().map_err(|_| Error::parse("PFM", "bad scale"))?;
        if body.len() < width * height * 4 {
            return Err(Error::parse("PFM", "truncated pixel data"));
        }
        let mut img = DepthImage::zeros(width, height);
        for (i, b) in body.chunks_exact(4).take(width * height).enumerate() {
            let raw = [b[0], b[1], b[2], b[3]];
            let v = if scale < 0.0 {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            let v = if v.is_finite() && v > 0.0 { v as f64 } else { 0.0 };
            let (x, row) = (i % width, i / width);
            img.set(x, height - 1 - row, v);
        }
        Ok(img)
    }

    /// Millimeters, rounded; depths beyond the 16-bit range are clamped.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        for &d in &self.data {
            let mm = (d * 1000.0).round().clamp(0.0, 65535.0) as u16;
            out.extend_from_slice(&mm.to_be_bytes());
        }
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (tokens, body) = split_header(bytes, 4, "PGM")?;
        if tokens[0] != "P5" {
            return Err(Error::parse("PGM", format!("unsupported type '{}'", tokens[0])));
        }
        let (width, height) = dims(&tokens, "PGM")?;
        let maxval: u32 = tokens[3].parse().map_err(|_| Error::parse("PGM", "bad maxval"))?;
        let bpp = if maxval > 255 { 2 } else { 1 };
        if body.len() < width * height * bpp {
            return Err(Error::parse("PGM", "truncated pixel data"));
        }
        let data = body
            .chunks_exact(bpp)
            .take(width * height)
            .map(|b| {
                let mm = if bpp == 2 { u16::from_be_bytes([b[0], b[1]]) } else { b[0] as u16 };
                mm as f64 / 1000.0
            })
            .collect();
        DepthImage::new(width, height, data)
    }
}

fn dims(tokens: &[String], ctx: &str) -> Result<(usize, usize)> {
    let w = tokens[1].parse().map_err(|_| Error::parse(ctx, "bad width"))?;
    let h = tokens[2].parse().map_err(|_| Error::parse(ctx, "bad height"))?;
    Ok((w, h))
}

/// Reads `n` whitespace-separated header tokens (skipping `#` comments);
/// exactly one whitespace byte separates the header from the payload.
fn split_header<'a>(bytes: &'a [u8], n: usize, ctx: &str) -> Result<(Vec<String>, &'a [u8])> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < n {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::parse(ctx, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err(Error::parse(ctx, "missing pixel data"));
    }
    Ok((tokens, &bytes[i + 1..]))
}

/// Clips a camera-frame polygon against the plane `z = NEAR`.
fn clip_near(poly: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (ina, inb) = (a.z >= NEAR, b.z >= NEAR);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (NEAR - a.z) / (b.z - a.z);
            out.push(a + (b - a) * t);
        }
    }
    out
}

fn raster_triangle(img: &mut DepthImage, k: &CameraIntrinsics, tri: [Vector3<f64>; 3]) {
    let px: [Vector2<f64>; 3] = tri.map(|p| k.project_point(&p));
    let area = (px[1] - px[0]).perp(&(px[2] - px[0]));
    if area.abs() < 1e-18 || !area.is_finite() {
        return;
    }
    let min_u = px.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let max_u = px.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let min_v = px.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let max_v = px.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let x0 = min_u.ceil().max(0.0);
    let x1 = max_u.floor().min(img.width as f64 - 1.0);
    let y0 = min_v.ceil().max(0.0);
    let y1 = max_v.floor().min(img.height as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return;
    }
    let inv_z = tri.map(|p| 1.0 / p.z);
    let eps = -1e-9;
    for y in y0 as usize..=y1 as usize {
        for x in x0 as usize..=x1 as usize {
            let q = Vector2::new(x as f64, y as f64);
            let l0 = (px[2] - px[1]).perp(&(q - px[1])) / area;
            let l1 = (px[0] - px[2]).perp(&(q - px[2])) / area;
            let l2 = 1.0 - l0 - l1;
            if l0 < eps || l1 < eps || l2 < eps {
                continue;
            }
            let z = 1.0 / (l0 * inv_z[0] + l1 * inv_z[1] + l2 * inv_z[2]);
            let cur = img.get(x, y);
            if z > 0.0 && (cur == 0.0 || z < cur) {
                img.set(x, y, z);
            }
        }
    }
}

/// Z-buffer rasterization at integer pixel centers with perspective-correct
/// depth; triangles are clipped at the near plane.
pub fn render_depth(model: &SurfaceModel, camera_pose: &RigidTransform, k: &CameraIntrinsics) -> DepthImage {
    let mut img = DepthImage::zeros(k.width as usize, k.height as usize);
    let cam = camera_pose.apply_all(&model.vertices);
    for t in &model.triangles {
        let poly = [
            cam.column(t[0]).into_owned(),
            cam.column(t[1]).into_owned(),
            cam.column(t[2]).into_owned(),
        ];
        if poly.iter().all(|p| p.z >= NEAR) {
            raster_triangle(&mut img, k, poly);
            continue;
        }
        let clipped = clip_near(&poly);
        for j in 1..clipped.len().saturating_sub(1) {
            raster_triangle(&mut img, k, [clipped[0], clipped[j], clipped[j + 1]]);
        }
    }
    img
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::{so3_exp, Rotation};
    use nalgebra::Matrix3xX;
    use proptest::prelude::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap()
    }

    fn tri_model(pts: &[[f64; 3]]) -> SurfaceModel {
        let v: Vec<Vector3<f64>> = pts.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect();
        let tris = (0..pts.len() / 3).map(|i| [3 * i, 3 * i + 1, 3 * i + 2]).collect();
        SurfaceModel::new(Matrix3xX::from_columns(&v), tris, None).unwrap()
    }

    pub(crate) fn unit_cube() -> SurfaceModel {
        let mut v = Vec::new();
        for i in 0..8 {
            v.push(Vector3::new(
                (i & 1) as f64 - 0.5,
                ((i >> 1) & 1) as f64 - 0.5,
                ((i >> 2) & 1) as f64 - 0.5,
            ));
        }
        let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
        let mut tris = Vec::new();
        for q in quads {
            tris.push([q[0], q[1], q[2]]);
            tris.push([q[0], q[2], q[3]]);
        }
        SurfaceModel::new(Matrix3xX::from_columns(&v), tris, None).unwrap()
    }

    fn ray_cast(model: &SurfaceModel, pose: &RigidTransform, dir: &Vector3<f64>) -> Option<f64> {
        let cam = pose.apply_all(&model.vertices);
        let mut best: Option<f64> = None;
        for t in &model.triangles {
            let (a, b, c) = (cam.column(t[0]), cam.column(t[1]), cam.column(t[2]));
            let e1 = b - a;
            let e2 = c - a;
            let pv = dir.cross(&e2);
            let det = e1.dot(&pv);
            if det.abs() < 1e-14 {
                continue;
            }
            let tv = -a;
            let u = tv.dot(&pv) / det;
            let qv = tv.cross(&e1);
            let v = dir.dot(&qv) / det;
            if u < -1e-12 || v < -1e-12 || u + v > 1.0 + 1e-12 {
                continue;
            }
            let s = e2.dot(&qv) / det;
            if s > 0.0 {
                let z = s * dir.z;
                best = Some(best.map_or(z, |b: f64| b.min(z)));
            }
        }
        best
    }

    #[test]
    fn fronto_parallel_triangle_reads_its_depth() {
        let m = tri_model(&[[-1.0, -1.0, 2.0], [1.0, -1.0, 2.0], [0.0, 1.0, 2.0]]);
        let img = render_depth(&m, &RigidTransform::identity(), &k());
        assert!(img.valid_count() > 100);
        for &d in img.data.iter().filter(|&&d| d > 0.0) {
            assert!((d - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn nearer_triangle_wins() {
        let m = tri_model(&[
            [-1.0, -1.0, 2.0],
            [1.0, -1.0, 2.0],
            [0.0, 1.0, 2.0],
            [-0.1, -0.1, 1.0],
            [0.1, -0.1, 1.0],
            [0.0, 0.1, 1.0],
        ]);
        let img = render_depth(&m, &RigidTransform::identity(), &k());
        assert_eq!(img.get(32, 24), 1.0);
        assert!((img.get(32, 5) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cube_matches_ray_cast_oracle() {
        let model = unit_cube();
        let pose = RigidTransform::new(so3_exp(&Vector3::new(0.4, 0.7, -0.2)), Vector3::new(0.1, -0.05, 4.0));
        let kk = k();
        let img = render_depth(&model, &pose, &kk);
        let mut hits = 0;
        for y in 0..48 {
            for x in 0..64 {
                let dir = kk.unproject(x as f64, y as f64, 1.0);
                let oracle = ray_cast(&model, &pose, &dir);
                let got = img.get(x, y);
                match (oracle, got > 0.0) {
                    (Some(z), true) => {
                        hits += 1;
                        assert!((got - z).abs() < 1e-4, "pixel {x},{y}: {got} vs {z}");
                    }
                    (None, false) => {}
                    _ => assert!(edge_pixel(&img, x, y), "coverage mismatch at {x},{y}"),
                }
            }
        }
        assert!(hits > 100);
    }

    fn edge_pixel(img: &DepthImage, x: usize, y: usize) -> bool {
        x == 0
            || y == 0
            || x + 1 == img.width
            || y + 1 == img.height
            || [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
                .iter()
                .any(|&(a, b)| img.get(a, b) == 0.0)
    }

    #[test]
    fn triangle_crossing_near_plane_is_clipped() {
        let m = tri_model(&[[-1.0, 0.0, -1.0], [1.0, 0.0, 3.0], [-1.0, 0.3, 3.0]]);
        let img = render_depth(&m, &RigidTransform::identity(), &k());
        assert!(img.data.iter().all(|d| d.is_finite() && *d >= 0.0));
        assert!(img.valid_count() > 0);
    }

    #[test]
    fn behind_camera_renders_nothing() {
        let m = tri_model(&[[-1.0, -1.0, -2.0], [1.0, -1.0, -2.0], [0.0, 1.0, -2.0]]);
        let img = render_depth(&m, &RigidTransform::new(Rotation::identity(), Vector3::zeros()), &k());
        assert_eq!(img.valid_count(), 0);
    }

    #[test]
    fn pgm_stores_millimeters() {
        let img = DepthImage::new(2, 1, vec![1.2345, 0.0]).unwrap();
        let back = DepthImage::from_pgm(&img.to_pgm()).unwrap();
        assert_eq!(back.data, vec![1.235, 0.0]);
    }

    #[test]
    fn pfm_rows_are_bottom_up() {
        let img = DepthImage::new(1, 2, vec![1.0, 2.0]).unwrap();
        let bytes = img.to_pfm();
        let body = &bytes[bytes.len() - 8..];
        assert_eq!(f32::from_le_bytes(body[..4].try_into().unwrap()), 2.0);
    }

    proptest! {
        #[test]
        fn pfm_round_trip_is_float32_exact(vals in proptest::collection::vec(0.0f32..10.0, 12)) {
            let data: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
            let img = DepthImage::new(4, 3, data).unwrap();
            prop_assert_eq!(DepthImage::from_pfm(&img.to_pfm()).unwrap(), img);
        }
    }
}
