//! Keypoint heatmaps: Gaussian synthesis, peak extraction, and the KHM1
//! container format.
//!
//! KHM1 layout: magic `KHM1`, little-endian `u32` width, height, channels,
//! then `channels * height * width` little-endian `f32` values, row-major per
//! channel. A JSON sidecar lists channel names and the crop mapping.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KHM_MAGIC: &[u8; 4] = b"KHM1";

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major, `height * width` entries.
    pub data: Vec<f64>,
    pub keypoint_name: String,
}

impl Heatmap {
    pub fn zeros(width: usize, height: usize, keypoint_name: impl Into<String>) -> Self {
        Heatmap {
            width,
            height,
            data: vec![0.0; width * height],
            keypoint_name: keypoint_name.into(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.data.len() != self.width * self.height {
            return Err(Error::InvalidInput(format!(
                "heatmap '{}' has bad shape {}x{} with {} values",
                self.keypoint_name,
                self.width,
                self.height,
                self.data.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "heatmap '{}' has non-finite entries",
                self.keypoint_name
            )));
        }
        Ok(())
    }
}

/// `amplitude · exp(−((x−u)² + (y−v)²) / (2σ²))` on an `H×W` grid.
pub fn synth_heatmap(
    u: f64,
    v: f64,
    height: usize,
    width: usize,
    sigma: f64,
    amplitude: f64,
    keypoint_name: impl Into<String>,
) -> Result<Heatmap> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
    }
    let mut hm = Heatmap::zeros(width, height, keypoint_name);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in 0..height {
        let dy = y as f64 - v;
        for x in 0..width {
            let dx = x as f64 - u;
            hm.data[y * width + x] = amplitude * (-(dx * dx + dy * dy) * inv).exp();
        }
    }
    Ok(hm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub u: f64,
    pub v: f64,
    pub confidence: f64,
}

/// Integer argmax with confidence equal to the peak value. Ties resolve to
/// the first occurrence in row-major order.
pub fn extract_peak(hm: &Heatmap) -> Peak {
    let mut best = 0;
    for (i, &val) in hm.data.iter().enumerate() {
        if val > hm.data[best] {
            best = i;
        }
    }
    Peak {
        u: (best % hm.width) as f64,
        v: (best / hm.width) as f64,
        confidence: hm.data.get(best).copied().unwrap_or(0.0),
    }
}

/// Argmax followed by a separable 3-point parabola fit on each axis.
pub fn extract_peak_subpixel(hm: &Heatmap) -> Peak {
    let peak = extract_peak(hm);
    let (x, y) = (peak.u as usize, peak.v as usize);
    let offset = |lo: f64, mid: f64, hi: f64| {
        let denom = lo - 2.0 * mid + hi;
        if denom < 0.0 {
            (0.5 * (lo - hi) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        }
    };
    let du = if x > 0 && x + 1 < hm.width {
        offset(hm.get(x - 1, y), hm.get(x, y), hm.get(x + 1, y))
    } else {
        0.0
    };
    let dv = if y > 0 && y + 1 < hm.height {
        offset(hm.get(x, y - 1), hm.get(x, y), hm.get(x, y + 1))
    } else {
        0.0
    };
    Peak {
        u: peak.u + du,
        v: peak.v + dv,
        confidence: peak.confidence,
    }
}

/// Affine map from heatmap pixels to full-image pixels: `image = scale · hm + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropMapping {
    pub scale: [f64; 2],
    pub offset: [f64; 2],
}

impl Default for CropMapping {
    fn default() -> Self {
        CropMapping {
            scale: [1.0, 1.0],
            offset: [0.0, 0.0],
        }
    }
}

impl CropMapping {
    pub fn to_image(&self, u: f64, v: f64) -> (f64, f64) {
        (self.scale[0] * u + self.offset[0], self.scale[1] * v + self.offset[1])
    }

    pub fn to_heatmap(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.offset[0]) / self.scale[0], (v - self.offset[1]) / self.scale[1])
    }
}

/// Channels sharing one grid size and one crop mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub maps: Vec<Heatmap>,
    pub crop: CropMapping,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KhmSidecar {
    pub names: Vec<String>,
    pub crop: CropMapping,
}

impl HeatmapStack {
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.maps.first().map(|m| (m.width, m.height))
    }

    pub fn write_khm<W: Write>(&self, mut out: W) -> Result<()> {
        let (width, height) = self.dims().unwrap_or((0, 0));
        for m in &self.maps {
            m.validate()?;
            if m.width != width || m.height != height {
                return Err(Error::Dimension("heatmap channels differ in size".into()));
            }
        }
        out.write_all(KHM_MAGIC)?;
        for v in [width, height, self.maps.len()] {
            let v = u32::try_from(v).map_err(|_| Error::InvalidInput("heatmap dimension exceeds u32".into()))?;
            out.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.maps.len() * width * height * 4);
        for m in &self.maps {
            for &v in &m.data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    /// Reads a KHM1 payload; channel names come from the sidecar.
    pub fn read_khm<R: Read>(mut input: R, sidecar: &KhmSidecar) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != KHM_MAGIC {
            return Err(Error::parse("KHM", "bad magic bytes"));
        }
        let mut word = [0u8; 4];
        let mut header = [0usize; 3];
        for h in header.iter_mut() {
            input.read_exact(&mut word)?;
            *h = u32::from_le_bytes(word) as usize;
        }
        let [width, height, channels] = header;
        if channels != sidecar.names.len() {
            return Err(Error::parse(
                "KHM",
                format!("{channels} channels but sidecar lists {} names", sidecar.names.len()),
            ));
        }
        let mut raw = vec![0u8; channels * width * height * 4];
        input.read_exact(&mut raw)?;
        let mut values = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        let maps = sidecar
            .names
            .iter()
            .map(|name| Heatmap {
                width,
                height,
                data: values.by_ref().take(width * height).collect(),
                keypoint_name: name.clone(),
            })
            .collect();
        Ok(HeatmapStack { maps, crop: sidecar.crop })
    }

    pub fn sidecar(&self) -> KhmSidecar {
        KhmSidecar {
            names: self.maps.iter().map(|m| m.keypoint_name.clone()).collect(),
            crop: self.crop,
        }
    }

    /// Writes `path` (KHM1) and `path` with a `.json` extension (sidecar).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_khm(&mut bytes)?;
        crate::io::write_atomic(path, &bytes)?;
        let side = serde_json::to_vec_pretty(&self.sidecar())?;
        crate::io::write_atomic(&path.with_extension("json"), &side)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side: KhmSidecar = serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)?;
        let file = std::fs::File::open(path)?;
        HeatmapStack::read_khm(std::io::BufReader::new(file), &side)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn integer_center_holds_amplitude() {
        let hm = synth_heatmap(10.0, 20.0, 40, 30, 1.0, 0.9, "a").unwrap();
        assert_eq!(hm.get(10, 20), 0.9);
        let p = extract_peak(&hm);
        assert_eq!((p.u, p.v, p.confidence), (10.0, 20.0, 0.9));
    }

    #[test]
    fn one_sigma_offset_value() {
        let hm = synth_heatmap(4.0, 5.0, 10, 10, 1.0, 2.0, "a").unwrap();
        assert_relative_eq!(hm.get(5, 5), 2.0 * (-0.5f64).exp(), epsilon = 1e-15);
        let hm = synth_heatmap(4.0, 5.0, 20, 20, 2.5, 1.0, "a").unwrap();
        assert_relative_eq!(hm.get(4, 5 + 2), (-(2.0f64 * 2.0) / (2.0 * 2.5 * 2.5)).exp(), epsilon = 1e-15);
    }

    #[test]
    fn mass_matches_gaussian_integral() {
        // ±7σ window around an on-grid center; the discrete sum of a
        // unit-spaced Gaussian with σ ≥ 1 matches the integral closely.
        for &sigma in &[1.0, 1.5, 2.0] {
            let half = (7.0 * sigma) as usize + 1;
            let n = 2 * half + 1;
            let hm = synth_heatmap(half as f64, half as f64, n, n, sigma, 0.7, "a").unwrap();
            let sum: f64 = hm.data.iter().sum();
            let want = 2.0 * std::f64::consts::PI * sigma * sigma * 0.7;
            assert!((sum - want).abs() / want < 1e-3, "sigma {sigma}: {sum} vs {want}");
        }
    }

    #[test]
    fn rejects_nonpositive_sigma() {
        assert!(synth_heatmap(0.0, 0.0, 3, 3, 0.0, 1.0, "a").is_err());
    }

    #[test]
    fn zero_grid_and_ties() {
        let hm = Heatmap::zeros(8, 8, "z");
        assert_eq!(
            extract_peak(&hm),
            Peak {
                u: 0.0,
                v: 0.0,
                confidence: 0.0
            }
        );
        let mut hm = Heatmap::zeros(8, 8, "t");
        hm.set(5, 5, 0.5);
        hm.set(3, 3, 0.5);
        let p = extract_peak(&hm);
        assert_eq!((p.u, p.v), (3.0, 3.0));
    }

    #[test]
    fn subpixel_refinement_recovers_offset() {
        let hm = synth_heatmap(10.3, 7.8, 20, 20, 1.0, 1.0, "a").unwrap();
        let p = extract_peak_subpixel(&hm);
        assert!((p.u - 10.3).abs() < 0.1 && (p.v - 7.8).abs() < 0.1, "{p:?}");
        assert_eq!((extract_peak(&hm).u, extract_peak(&hm).v), (10.0, 8.0));
    }

    #[test]
    fn khm_round_trip_is_f32_exact() {
        let a = synth_heatmap(3.2, 4.1, 9, 11, 1.0, 0.8, "left").unwrap();
        let b = synth_heatmap(7.0, 1.0, 9, 11, 1.0, 0.3, "right").unwrap();
        let stack = HeatmapStack {
            maps: vec![a, b],
            crop: CropMapping {
                scale: [2.0, 2.0],
                offset: [100.0, 50.0],
            },
        };
        let mut bytes = Vec::new();
        stack.write_khm(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"KHM1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 11);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 9);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 16 + 2 * 9 * 11 * 4);
        let back = HeatmapStack::read_khm(&bytes[..], &stack.sidecar()).unwrap();
        for (m, n) in stack.maps.iter().zip(&back.maps) {
            assert_eq!(m.keypoint_name, n.keypoint_name);
            for (x, y) in m.data.iter().zip(&n.data) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // a second pass is bit-identical
        let mut again = Vec::new();
        back.write_khm(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn khm_rejects_bad_magic() {
        let side = KhmSidecar {
            names: vec![],
            crop: CropMapping::default(),
        };
        assert!(HeatmapStack::read_khm(&b"KHM2\0\0\0\0\0\0\0\0\0\0\0\0"[..], &side).is_err());
    }

    #[test]
    fn crop_mapping_inverts() {
        let c = CropMapping {
            scale: [4.0, 2.0],
            offset: [10.0, -3.0],
        };
        let (u, v) = c.to_image(1.5, 2.5);
        assert_eq!((u, v), (16.0, 2.0));
        assert_eq!(c.to_heatmap(u, v), (1.5, 2.5));
    }

    proptest! {
        #[test]
        fn peak_is_rounded_center(u in 3.0f64..37.0, v in 3.0f64..27.0) {
            let hm = synth_heatmap(u, v, 30, 40, 1.0, 1.0, "a").unwrap();
            let p = extract_peak(&hm);
            prop_assert_eq!((p.u, p.v), (u.round(), v.round()));
        }

        #[test]
        fn positive_scaling_keeps_argmax(u in 0.0f64..20.0, v in 0.0f64..20.0, k in 0.01f64..100.0) {
            let hm = synth_heatmap(u, v, 20, 20, 1.3, 1.0, "a").unwrap();
            let mut scaled = hm.clone();
            scaled.data.iter_mut().for_each(|x| *x *= k);
            let (p, q) = (extract_peak(&hm), extract_peak(&scaled));
            prop_assert_eq!((p.u, p.v), (q.u, q.v));
            prop_assert!((q.confidence >= p.confidence) == (k >= 1.0) || (q.confidence - p.confidence).abs() < 1e-15);
        }
    }
}
