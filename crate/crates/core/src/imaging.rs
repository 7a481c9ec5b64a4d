//! Raster containers, tile grids, mask resampling and affine mask transfer.
//!
//! All coordinates are integer pixel indices with the origin at the top-left
//! corner, `x` growing to the right and `y` growing downwards. Pixel `(x, y)`
//! covers the half-open square `[x, x + 1) × [y, y + 1)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical sampling of a raster in µm per pixel.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Resolution(f64);

impl Resolution {
    /// 40× scan resolution.
    pub const SCAN_40X: Resolution = Resolution(0.25);
    /// 20× working resolution of the segmentation model.
    pub const SCAN_20X: Resolution = Resolution(0.5);

    pub fn new(microns_per_pixel: f64) -> Result<Self> {
        if microns_per_pixel.is_finite() && microns_per_pixel > 0.0 {
            Ok(Resolution(microns_per_pixel))
        } else {
            Err(Error::param(format!(
                "resolution must be positive and finite, got {microns_per_pixel}"
            )))
        }
    }

    pub fn microns_per_pixel(self) -> f64 {
        self.0
    }

    /// Area of one pixel in mm².
    pub fn pixel_area_mm2(self) -> f64 {
        let mm = self.0 * 1e-3;
        mm * mm
    }
}

impl TryFrom<f64> for Resolution {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Resolution::new(value)
    }
}

impl From<Resolution> for f64 {
    fn from(r: Resolution) -> f64 {
        r.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PixelData {
    Byte(Vec<u8>),
    /// Unit-interval samples.
    Float(Vec<f64>),
}

/// Row-major, interleaved raster with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    resolution: Resolution,
    data: PixelData,
}

impl RasterImage {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        resolution: Resolution,
        data: PixelData,
    ) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::input(format!(
                "unsupported channel count {channels}"
            )));
        }
        let len = match &data {
            PixelData::Byte(v) => v.len(),
            PixelData::Float(v) => v.len(),
        };
        if len != width * height * channels {
            return Err(Error::input(format!(
                "pixel buffer has {len} samples, expected {width}×{height}×{channels}"
            )));
        }
        if let PixelData::Float(v) = &data {
            if let Some(bad) = v.iter().find(|s| !(0.0..=1.0).contains(*s)) {
                return Err(Error::input(format!("float sample {bad} outside [0, 1]")));
            }
        }
        Ok(RasterImage {
            width,
            height,
            channels,
            resolution,
            data,
        })
    }

    pub fn rgb8(
        width: usize,
        height: usize,
        resolution: Resolution,
        data: Vec<u8>,
    ) -> Result<Self> {
        Self::new(width, height, 3, resolution, PixelData::Byte(data))
    }

    pub fn gray8(
        width: usize,
        height: usize,
        resolution: Resolution,
        data: Vec<u8>,
    ) -> Result<Self> {
        Self::new(width, height, 1, resolution, PixelData::Byte(data))
    }

    pub fn gray_f64(
        width: usize,
        height: usize,
        resolution: Resolution,
        data: Vec<f64>,
    ) -> Result<Self> {
        Self::new(width, height, 1, resolution, PixelData::Float(data))
    }

    /// Uniform RGB image.
    pub fn filled_rgb8(width: usize, height: usize, resolution: Resolution, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        RasterImage {
            width,
            height,
            channels: 3,
            resolution,
            data: PixelData::Byte(data),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn data(&self) -> &PixelData {
        &self.data
    }

    pub fn bytes(&self) -> Option<&[u8]> {
        match &self.data {
            PixelData::Byte(v) => Some(v),
            PixelData::Float(_) => None,
        }
    }

    pub fn floats(&self) -> Option<&[f64]> {
        match &self.data {
            PixelData::Float(v) => Some(v),
            PixelData::Byte(_) => None,
        }
    }

    pub fn is_rgb8(&self) -> bool {
        self.channels == 3 && matches!(self.data, PixelData::Byte(_))
    }

    pub fn into_bytes(self) -> Option<Vec<u8>> {
        match self.data {
            PixelData::Byte(v) => Some(v),
            PixelData::Float(_) => None,
        }
    }

    pub fn into_floats(self) -> Option<Vec<f64>> {
        match self.data {
            PixelData::Float(v) => Some(v),
            PixelData::Byte(_) => None,
        }
    }

    /// Copy of the pixels inside `rect`.
    pub fn crop(&self, rect: TileRect) -> Result<RasterImage> {
        if !rect.fits_in(self.width, self.height) {
            return Err(Error::input(format!(
                "crop {rect:?} outside {}×{} image",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let row_len = rect.w * c;
        let span = |y: usize| {
            let start = ((rect.y + y) * self.width + rect.x) * c;
            start..start + row_len
        };
        let data = match &self.data {
            PixelData::Byte(v) => PixelData::Byte(
                (0..rect.h)
                    .flat_map(|y| v[span(y)].iter().copied())
                    .collect(),
            ),
            PixelData::Float(v) => PixelData::Float(
                (0..rect.h)
                    .flat_map(|y| v[span(y)].iter().copied())
                    .collect(),
            ),
        };
        Ok(RasterImage {
            width: rect.w,
            height: rect.h,
            channels: c,
            resolution: self.resolution,
            data,
        })
    }
}

/// Row-major boolean raster; `true` is foreground (epithelium).
#[derive(Clone, PartialEq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    resolution: Resolution,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("resolution", &self.resolution)
            .field("foreground", &self.count_foreground())
            .finish()
    }
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize, resolution: Resolution) -> Self {
        BinaryMask {
            width,
            height,
            resolution,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize, resolution: Resolution) -> Self {
        BinaryMask {
            width,
            height,
            resolution,
            bits: vec![true; width * height],
        }
    }

    pub fn from_bits(
        width: usize,
        height: usize,
        resolution: Resolution,
        bits: Vec<bool>,
    ) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::input(format!(
                "mask buffer has {} bits, expected {width}×{height}",
                bits.len()
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            resolution,
            bits,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        resolution: Resolution,
        f: impl Fn(usize, usize) -> bool + Sync,
    ) -> Self {
        let mut bits = vec![false; width * height];
        if width > 0 {
            bits.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
                for (x, b) in row.iter_mut().enumerate() {
                    *b = f(x, y);
                }
            });
        }
        BinaryMask {
            width,
            height,
            resolution,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn with_resolution(mut self, resolution: Resolution) -> Self {
        self.resolution = resolution;
        self
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn into_bits(self) -> Vec<bool> {
        self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Like [`get`](Self::get) but `false` outside the raster.
    #[inline]
    pub fn get_or_background(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.bits[y as usize * self.width + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count_foreground(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn count_in(&self, rect: TileRect) -> usize {
        (rect.y..rect.y + rect.h)
            .map(|y| {
                let row = &self.bits[y * self.width..(y + 1) * self.width];
                row[rect.x..rect.x + rect.w].iter().filter(|&&b| b).count()
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            bits: self.bits.iter().map(|&b| !b).collect(),
            ..self.clone()
        }
    }

    /// Copy of the bits inside `rect`.
    pub fn crop(&self, rect: TileRect) -> Result<BinaryMask> {
        if !rect.fits_in(self.width, self.height) {
            return Err(Error::input(format!(
                "crop {rect:?} outside {}×{} mask",
                self.width, self.height
            )));
        }
        let bits = (rect.y..rect.y + rect.h)
            .flat_map(|y| {
                let start = y * self.width + rect.x;
                self.bits[start..start + rect.w].iter().copied()
            })
            .collect();
        Ok(BinaryMask {
            width: rect.w,
            height: rect.h,
            resolution: self.resolution,
            bits,
        })
    }

    /// ORs `patch` into `self` with its top-left corner at `(x, y)`.
    pub fn or_patch(&mut self, patch: &BinaryMask, x: usize, y: usize) -> Result<()> {
        let rect = TileRect::new(x, y, patch.width, patch.height);
        if !rect.fits_in(self.width, self.height) {
            return Err(Error::input(format!(
                "patch {rect:?} outside {}×{} mask",
                self.width, self.height
            )));
        }
        for py in 0..patch.height {
            let dst = &mut self.bits[(y + py) * self.width + x..][..patch.width];
            let src = &patch.bits[py * patch.width..(py + 1) * patch.width];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d |= s;
            }
        }
        Ok(())
    }

    /// 8-bit rendering with background 0 and foreground 255.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }
}

/// Axis-aligned pixel window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl TileRect {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        TileRect { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.x + self.w <= width && self.y + self.h <= height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn intersection(&self, other: &TileRect) -> Option<TileRect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        (x0 < x1 && y0 < y1).then(|| TileRect::new(x0, y0, x1 - x0, y1 - y0))
    }
}

/// Overlapping windows covering an image, ordered row-major by `(y, x)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    tiles: Vec<TileRect>,
    tile_size: usize,
    overlap: usize,
    image_dims: (usize, usize),
}

impl TileGrid {
    pub fn tiles(&self) -> &[TileRect] {
        &self.tiles
    }

    pub fn tile_size(&self) -> usize {
        self.tile_size
    }

    pub fn overlap(&self) -> usize {
        self.overlap
    }

    pub fn image_dims(&self) -> (usize, usize) {
        self.image_dims
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }
}

fn axis_positions(dim: usize, tile: usize, stride: usize) -> Vec<(usize, usize)> {
    if dim <= tile {
        return vec![(0, dim)];
    }
    let mut positions = Vec::new();
    let mut p = 0;
    while p + tile < dim {
        positions.push(p);
        p += stride;
    }
    let last = dim - tile;
    if positions.last() != Some(&last) {
        positions.push(last);
    }
    // the clamped position can fall below the previous stride step
    positions.sort_unstable();
    positions.dedup();
    positions.into_iter().map(|p| (p, tile)).collect()
}

/// Overlapping tiling with stride `tile_size − overlap`.
///
/// The last window on each axis is clamped to end at the image border so
/// every window holds only real pixels; an axis shorter than `tile_size`
/// gets a single window spanning it.
pub fn make_tile_grid(
    image_dims: (usize, usize),
    tile_size: usize,
    overlap: usize,
) -> Result<TileGrid> {
    let (width, height) = image_dims;
    if width == 0 || height == 0 {
        return Err(Error::param(format!(
            "image dims must be positive, got {image_dims:?}"
        )));
    }
    if tile_size == 0 || overlap >= tile_size {
        return Err(Error::param(format!(
            "need tile_size > overlap ≥ 0, got tile_size {tile_size}, overlap {overlap}"
        )));
    }
    let stride = tile_size - overlap;
    let xs = axis_positions(width, tile_size, stride);
    let ys = axis_positions(height, tile_size, stride);
    let tiles = ys
        .iter()
        .flat_map(|&(y, h)| xs.iter().map(move |&(x, w)| TileRect::new(x, y, w, h)))
        .collect();
    Ok(TileGrid {
        tiles,
        tile_size,
        overlap,
        image_dims,
    })
}

#[inline]
fn nearest_source(dst: usize, factor: f64, src_len: usize) -> usize {
    let s = ((dst as f64 + 0.5) / factor).floor() as usize;
    s.min(src_len - 1)
}

/// Nearest-neighbour rescale by `factor`; output dims are `round(dims × factor)`.
///
/// Destination pixel `d` samples source pixel `floor((d + 0.5) / factor)`.
pub fn resample_mask(mask: &BinaryMask, factor: f64) -> Result<BinaryMask> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::param(format!(
            "resample factor must be positive, got {factor}"
        )));
    }
    let out_w = (mask.width as f64 * factor).round() as usize;
    let out_h = (mask.height as f64 * factor).round() as usize;
    if out_w == 0 || out_h == 0 {
        return Err(Error::param(format!(
            "factor {factor} turns {}×{} into an empty mask",
            mask.width, mask.height
        )));
    }
    let resolution = Resolution::new(mask.resolution.microns_per_pixel() / factor)?;
    let xs: Vec<usize> = (0..out_w)
        .map(|x| nearest_source(x, factor, mask.width))
        .collect();
    Ok(BinaryMask::from_fn(out_w, out_h, resolution, |x, y| {
        mask.get(xs[x], nearest_source(y, factor, mask.height))
    }))
}

/// Box-average downsampling of an RGB8 image by an integer factor.
///
/// Output pixel `(x, y)` averages the source block starting at
/// `(x·factor, y·factor)`; blocks at the right and bottom edges may be
/// partial. Averages are rounded half up.
pub fn downsample_rgb(image: &RasterImage, factor: usize) -> Result<RasterImage> {
    let src = image
        .bytes()
        .filter(|_| image.channels() == 3)
        .ok_or_else(|| Error::input("downsampling expects an 8-bit RGB image"))?;
    if factor == 0 {
        return Err(Error::param("downsampling factor must be ≥ 1"));
    }
    let (w, h) = image.dims();
    let out_w = w.div_ceil(factor);
    let out_h = h.div_ceil(factor);
    let mut out = vec![0u8; out_w * out_h * 3];
    out.par_chunks_mut(out_w * 3)
        .enumerate()
        .for_each(|(oy, row)| {
            let y0 = oy * factor;
            let y1 = (y0 + factor).min(h);
            for ox in 0..out_w {
                let x0 = ox * factor;
                let x1 = (x0 + factor).min(w);
                let mut acc = [0u64; 3];
                for y in y0..y1 {
                    let line = &src[(y * w + x0) * 3..(y * w + x1) * 3];
                    for px in line.chunks_exact(3) {
                        for c in 0..3 {
                            acc[c] += px[c] as u64;
                        }
                    }
                }
                let n = ((y1 - y0) * (x1 - x0)) as u64;
                for c in 0..3 {
                    row[ox * 3 + c] = ((2 * acc[c] + n) / (2 * n)) as u8;
                }
            }
        });
    let resolution = Resolution::new(image.resolution().microns_per_pixel() * factor as f64)?;
    RasterImage::rgb8(out_w, out_h, resolution, out)
}

/// Homogeneous 2-D affine map from source to destination pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    m: [[f64; 3]; 3],
}

impl AffineTransform {
    const SINGULAR_EPS: f64 = 1e-12;

    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite matrix entry".into()));
        }
        if m[2] != [0.0, 0.0, 1.0] {
            return Err(Error::InvalidTransform(format!(
                "last row must be (0, 0, 1), got {:?}",
                m[2]
            )));
        }
        let t = AffineTransform { m };
        if t.determinant().abs() < Self::SINGULAR_EPS {
            return Err(Error::InvalidTransform("linear part is singular".into()));
        }
        Ok(t)
    }

    pub fn identity() -> Self {
        AffineTransform {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        AffineTransform {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]],
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let det = self.determinant();
        if det.abs() < Self::SINGULAR_EPS {
            return Err(Error::InvalidTransform("linear part is singular".into()));
        }
        let [[a, b, tx], [c, d, ty], _] = self.m;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(AffineTransform {
            m: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, id, -(ic * tx + id * ty)],
                [0.0, 0.0, 1.0],
            ],
        })
    }
}

/// Warps `mask` into a `out_dims` raster by inverse mapping.
///
/// Destination pixel `p` is foreground iff the source pixel at
/// `round(t⁻¹·p)` exists and is foreground.
pub fn apply_affine(
    mask: &BinaryMask,
    t: &AffineTransform,
    out_dims: (usize, usize),
) -> Result<BinaryMask> {
    let inv = t.inverse()?;
    Ok(BinaryMask::from_fn(
        out_dims.0,
        out_dims.1,
        mask.resolution,
        |x, y| {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            mask.get_or_background(sx.round() as i64, sy.round() as i64)
        },
    ))
}

/// Random-access reader over a (possibly very large) RGB image.
pub trait RegionSource: Sync {
    fn dims(&self) -> (usize, usize);

    fn resolution(&self) -> Resolution;

    /// Reads `rect` as an RGB8 raster.
    fn read_region(&self, rect: TileRect) -> Result<RasterImage>;
}

impl RegionSource for RasterImage {
    fn dims(&self) -> (usize, usize) {
        RasterImage::dims(self)
    }

    fn resolution(&self) -> Resolution {
        self.resolution
    }

    fn read_region(&self, rect: TileRect) -> Result<RasterImage> {
        if !self.is_rgb8() {
            return Err(Error::input("region source must be 8-bit RGB"));
        }
        self.crop(rect)
    }
}

/// Box-downsamples a whole source by `factor`, reading it in aligned chunks.
pub fn downsample_source(source: &dyn RegionSource, factor: usize) -> Result<RasterImage> {
    if factor == 0 {
        return Err(Error::param("downsampling factor must be ≥ 1"));
    }
    let (w, h) = source.dims();
    let chunk = factor * (1024 / factor).max(1);
    let out_w = w.div_ceil(factor);
    let out_h = h.div_ceil(factor);
    let chunks: Vec<TileRect> = (0..h)
        .step_by(chunk)
        .flat_map(|y| {
            (0..w)
                .step_by(chunk)
                .map(move |x| TileRect::new(x, y, chunk.min(w - x), chunk.min(h - y)))
        })
        .collect();
    let parts = chunks
        .par_iter()
        .map(|&rect| downsample_rgb(&source.read_region(rect)?, factor).map(|img| (rect, img)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![0u8; out_w * out_h * 3];
    for (rect, part) in parts {
        let (ox, oy) = (rect.x / factor, rect.y / factor);
        let bytes = part.bytes().expect("rgb8");
        for py in 0..part.height() {
            let dst = ((oy + py) * out_w + ox) * 3;
            let src = py * part.width() * 3;
            out[dst..dst + part.width() * 3].copy_from_slice(&bytes[src..src + part.width() * 3]);
        }
    }
    let resolution = Resolution::new(source.resolution().microns_per_pixel() * factor as f64)?;
    RasterImage::rgb8(out_w, out_h, resolution, out)
}
