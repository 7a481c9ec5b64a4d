//! Optical density and colour deconvolution.
//!
//! Bright-field absorbance follows Beer–Lambert: the optical density of a
//! pixel is a non-negative combination of per-stain OD vectors,
//! `od = Σ cᵢ·vᵢ`. Deconvolution recovers the concentrations `c` by least
//! squares against the stain basis.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{RasterImage, Resolution};

/// Singular-value ratio above which the basis is rejected.
pub const MAX_CONDITION: f64 = 1e4;

/// Default concentration mapped to gray value 1.0 by [`extract_channel`].
pub const DEFAULT_SATURATION: f64 = 2.0;

pub const WHITE: [u8; 3] = [255, 255, 255];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stain {
    pub name: String,
    pub od_rgb: [f64; 3],
}

/// On-disk stain basis: `{ "stains": [{ "name": …, "od_rgb": [r, g, b] }, …] }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StainConfig {
    pub stains: Vec<Stain>,
}

/// Two or three unit-norm stain vectors plus the precomputed unmixing rows.
#[derive(Debug, Clone, PartialEq)]
pub struct StainMatrix {
    stains: Vec<Stain>,
    unmix: Vec<[f64; 3]>,
    condition: f64,
}

impl StainMatrix {
    /// Builds a basis from raw OD vectors; each is normalised to unit length.
    pub fn new(stains: Vec<Stain>) -> Result<Self> {
        if !(2..=3).contains(&stains.len()) {
            return Err(Error::param(format!(
                "stain matrix needs 2 or 3 stains, got {}",
                stains.len()
            )));
        }
        let mut normalized = Vec::with_capacity(stains.len());
        for (i, s) in stains.into_iter().enumerate() {
            if s.name.is_empty() {
                return Err(Error::param(format!("stain {i} has an empty name")));
            }
            if normalized.iter().any(|n: &Stain| n.name == s.name) {
                return Err(Error::param(format!("duplicate stain name `{}`", s.name)));
            }
            let norm = s.od_rgb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 || s.od_rgb.iter().any(|v| *v < 0.0) {
                return Err(Error::param(format!(
                    "stain `{}` needs a non-zero, non-negative OD vector",
                    s.name
                )));
            }
            normalized.push(Stain {
                name: s.name,
                od_rgb: s.od_rgb.map(|v| v / norm),
            });
        }

        let k = normalized.len();
        let basis = DMatrix::from_fn(k, 3, |r, c| normalized[r].od_rgb[c]);
        let gram = &basis * basis.transpose();
        let eigen = SymmetricEigen::new(gram.clone());
        let (lo, hi) = eigen
            .eigenvalues
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let condition = if lo > 0.0 {
            (hi / lo).sqrt()
        } else {
            f64::INFINITY
        };
        if condition.is_nan() || condition > MAX_CONDITION {
            return Err(Error::IllConditionedStainMatrix { condition });
        }
        let gram_inv = gram
            .try_inverse()
            .ok_or(Error::IllConditionedStainMatrix { condition })?;
        // (M Mᵀ)⁻¹ M: least-squares unmixing; the exact inverse of Mᵀ for 3 stains
        let pinv = gram_inv * basis;
        let unmix = (0..k)
            .map(|r| [pinv[(r, 0)], pinv[(r, 1)], pinv[(r, 2)]])
            .collect();
        Ok(StainMatrix {
            stains: normalized,
            unmix,
            condition,
        })
    }

    /// Hematoxylin + DAB basis.
    pub fn h_dab() -> Self {
        StainMatrix::new(vec![
            Stain {
                name: "hematoxylin".into(),
                od_rgb: [0.650, 0.704, 0.286],
            },
            Stain {
                name: "dab".into(),
                od_rgb: [0.269, 0.568, 0.776],
            },
        ])
        .expect("built-in H-DAB basis is well conditioned")
    }

    pub fn from_config(config: StainConfig) -> Result<Self> {
        Self::new(config.stains)
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        let config: StainConfig = serde_json::from_str(json).map_err(|e| Error::Json {
            path: "<stain config>".into(),
            source: e,
        })?;
        Self::from_config(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: StainConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_config(config)
    }

    pub fn to_config(&self) -> StainConfig {
        StainConfig {
            stains: self.stains.clone(),
        }
    }

    pub fn stains(&self) -> &[Stain] {
        &self.stains
    }

    pub fn len(&self) -> usize {
        self.stains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stains.is_empty()
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.stains
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::UnknownStain(name.to_owned()))
    }

    /// Optical density produced by the given concentrations, `Mᵀc`.
    pub fn compose(&self, concentrations: &[f64]) -> [f64; 3] {
        let mut od = [0.0; 3];
        for (s, &c) in self.stains.iter().zip(concentrations) {
            for (o, v) in od.iter_mut().zip(s.od_rgb) {
                *o += c * v;
            }
        }
        od
    }

    /// Least-squares concentration of stain `index`, clamped at zero.
    #[inline]
    pub fn unmix_one(&self, index: usize, od: [f64; 3]) -> f64 {
        let row = &self.unmix[index];
        (row[0] * od[0] + row[1] * od[1] + row[2] * od[2]).max(0.0)
    }
}

/// Per-pixel optical density, three channels.
#[derive(Debug, Clone, PartialEq)]
pub struct OdImage {
    width: usize,
    height: usize,
    resolution: Resolution,
    data: Vec<[f64; 3]>,
}

impl OdImage {
    pub fn new(
        width: usize,
        height: usize,
        resolution: Resolution,
        data: Vec<[f64; 3]>,
    ) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::input("OD buffer length does not match dims"));
        }
        if data.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::input(
                "optical densities must be finite and non-negative",
            ));
        }
        Ok(OdImage {
            width,
            height,
            resolution,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }
}

/// One plane of concentrations per stain.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationImage {
    width: usize,
    height: usize,
    resolution: Resolution,
    names: Vec<String>,
    planes: Vec<Vec<f64>>,
}

impl ConcentrationImage {
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn channel(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.planes[i].as_slice())
            .ok_or_else(|| Error::UnknownStain(name.to_owned()))
    }
}

/// Per-channel OD lookup for byte intensities.
fn od_table(background: u8) -> [f64; 256] {
    let i0 = background as f64;
    std::array::from_fn(|i| (-((i.max(1) as f64) / i0).log10()).max(0.0))
}

fn od_tables(background: [u8; 3]) -> Result<[[f64; 256]; 3]> {
    if background.contains(&0) {
        return Err(Error::param("background intensity must be ≥ 1 per channel"));
    }
    Ok(background.map(od_table))
}

fn rgb_bytes(image: &RasterImage) -> Result<&[u8]> {
    image
        .bytes()
        .filter(|_| image.channels() == 3)
        .ok_or_else(|| Error::input("expected an 8-bit RGB image"))
}

/// `OD = −log10(max(I, 1) / I0)` per channel, clamped at zero.
pub fn rgb_to_od(image: &RasterImage, background: [u8; 3]) -> Result<OdImage> {
    let tables = od_tables(background)?;
    let data = rgb_bytes(image)?
        .par_chunks_exact(3)
        .map(|px| {
            [
                tables[0][px[0] as usize],
                tables[1][px[1] as usize],
                tables[2][px[2] as usize],
            ]
        })
        .collect();
    Ok(OdImage {
        width: image.width(),
        height: image.height(),
        resolution: image.resolution(),
        data,
    })
}

/// Least-squares unmixing of every pixel; negative concentrations clamp to 0.
pub fn deconvolve(od: &OdImage, m: &StainMatrix) -> ConcentrationImage {
    let planes = (0..m.len())
        .map(|s| od.data.par_iter().map(|&p| m.unmix_one(s, p)).collect())
        .collect();
    ConcentrationImage {
        width: od.width,
        height: od.height,
        resolution: od.resolution,
        names: m.stains.iter().map(|s| s.name.clone()).collect(),
        planes,
    }
}

fn check_saturation(saturation: f64) -> Result<()> {
    if saturation.is_finite() && saturation > 0.0 {
        Ok(())
    } else {
        Err(Error::param(format!(
            "saturation must be positive, got {saturation}"
        )))
    }
}

/// Selected stain rescaled to `[0, 1]` as `min(c / saturation, 1)`.
pub fn extract_channel(
    c: &ConcentrationImage,
    stain_name: &str,
    saturation: f64,
) -> Result<RasterImage> {
    check_saturation(saturation)?;
    let plane = c.channel(stain_name)?;
    let gray = plane
        .par_iter()
        .map(|&v| (v / saturation).min(1.0))
        .collect();
    RasterImage::gray_f64(c.width, c.height, c.resolution, gray)
}

/// Fused `rgb_to_od → deconvolve → extract_channel` for a single stain.
///
/// Produces exactly the samples of the three-step chain without holding the
/// intermediate OD and concentration planes.
pub fn stain_gray(
    image: &RasterImage,
    background: [u8; 3],
    m: &StainMatrix,
    stain_name: &str,
    saturation: f64,
) -> Result<RasterImage> {
    check_saturation(saturation)?;
    let tables = od_tables(background)?;
    let index = m.index_of(stain_name)?;
    let gray = rgb_bytes(image)?
        .par_chunks_exact(3)
        .map(|px| {
            let od = [
                tables[0][px[0] as usize],
                tables[1][px[1] as usize],
                tables[2][px[2] as usize],
            ];
            (m.unmix_one(index, od) / saturation).min(1.0)
        })
        .collect();
    RasterImage::gray_f64(image.width(), image.height(), image.resolution(), gray)
}

/// RGB bytes that a given concentration vector would produce: the inverse of
/// [`rgb_to_od`] followed by composition, rounded to the nearest byte.
pub fn render_rgb(m: &StainMatrix, concentrations: &[f64], background: [u8; 3]) -> [u8; 3] {
    let od = m.compose(concentrations);
    std::array::from_fn(|c| {
        let v = background[c] as f64 * 10f64.powf(-od[c]);
        v.round().clamp(0.0, 255.0) as u8
    })
}
