//! Gaussian blur, Otsu thresholding and binary morphology with disk kernels.
//!
//! Binary erosion and dilation are evaluated through an exact squared
//! Euclidean distance transform, so their cost does not depend on the
//! kernel radius: a pixel is in `dilate(m, r)` iff some foreground pixel lies
//! within squared distance `r²`, which is exactly the inclusive integer disk
//! `dx² + dy² ≤ r²`. Pixels outside the raster are background for both
//! operators.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, RasterImage};

/// Flat disk structuring element `{ (dx, dy) : dx² + dy² ≤ radius² }`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiskKernel {
    pub radius: u32,
}

impl DiskKernel {
    pub const fn new(radius: u32) -> Self {
        DiskKernel { radius }
    }

    pub fn offsets(&self) -> Vec<(i64, i64)> {
        let r = self.radius as i64;
        (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MorphOp {
    Erode,
    Dilate,
    Open,
    Close,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Separable Gaussian blur of a unit-float gray image.
///
/// The kernel is truncated at `⌈3σ⌉` and renormalised; borders replicate the
/// edge pixel. `sigma == 0` returns the input unchanged.
pub fn gaussian_blur(image: &RasterImage, sigma: f64) -> Result<RasterImage> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::param(format!("sigma must be ≥ 0, got {sigma}")));
    }
    let src = image
        .floats()
        .filter(|_| image.channels() == 1)
        .ok_or_else(|| Error::input("gaussian_blur expects a unit-float gray image"))?;
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (w, h) = image.dims();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;

    let mut horizontal = vec![0.0; w * h];
    horizontal
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(y, row)| {
            let line = &src[y * w..(y + 1) * w];
            for (x, out) in row.iter_mut().enumerate() {
                *out = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wk)| wk * line[clamp(x as i64 + k as i64 - radius, w)])
                    .sum();
            }
        });
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (k, wk) in kernel.iter().enumerate() {
            let sy = clamp(y as i64 + k as i64 - radius, h);
            let line = &horizontal[sy * w..(sy + 1) * w];
            for (o, v) in row.iter_mut().zip(line) {
                *o += wk * v;
            }
        }
        // renormalised weights can overshoot 1 by an ulp
        for o in row.iter_mut() {
            *o = o.clamp(0.0, 1.0);
        }
    });
    RasterImage::gray_f64(w, h, image.resolution(), out)
}

/// Result of an Otsu search. Foreground is `value > threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Otsu {
    pub threshold: u8,
    /// Set when the histogram has a single occupied bin; `threshold` is then
    /// that value and the foreground is empty.
    pub degenerate: bool,
}

/// `(N·S₀ − n₀·S)²` and `n₀·n₁`, whose ratio is `N²·σ_b²`.
fn between_class_ratio(total: u64, sum: u64, n0: u64, s0: u64) -> (u128, u128) {
    let diff = (total as i128) * (s0 as i128) - (n0 as i128) * (sum as i128);
    let num = diff.unsigned_abs();
    (num.saturating_mul(num), n0 as u128 * (total - n0) as u128)
}

/// `a/b > c/d`, exact whenever the products fit in 128 bits.
fn ratio_greater(a: u128, b: u128, c: u128, d: u128) -> bool {
    if a == u128::MAX || c == u128::MAX {
        return (a as f64) / (b as f64) > (c as f64) / (d as f64);
    }
    match (a.checked_mul(d), c.checked_mul(b)) {
        (Some(l), Some(r)) => l > r,
        _ => (a as f64) / (b as f64) > (c as f64) / (d as f64),
    }
}

/// Otsu threshold of a 256-bin histogram.
///
/// Maximises the between-class variance `w₀·w₁·(µ₀ − µ₁)²` over
/// `t ∈ [0, 255]` with class 0 = `{v ≤ t}`; ties go to the smallest `t`.
pub fn otsu_from_histogram(hist: &[u64; 256]) -> Result<Otsu> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(Error::input("otsu_threshold on an empty image"));
    }
    let sum: u64 = hist.iter().enumerate().map(|(v, &n)| v as u64 * n).sum();
    let occupied: Vec<usize> = (0..256).filter(|&v| hist[v] > 0).collect();
    if occupied.len() == 1 {
        return Ok(Otsu {
            threshold: occupied[0] as u8,
            degenerate: true,
        });
    }
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best: Option<(u8, u128, u128)> = None;
    for (t, &n) in hist.iter().enumerate() {
        n0 += n;
        s0 += t as u64 * n;
        if n0 == 0 || n0 == total {
            continue;
        }
        let (num, den) = between_class_ratio(total, sum, n0, s0);
        match best {
            Some((_, bn, bd)) if !ratio_greater(num, den, bn, bd) => {}
            _ => best = Some((t as u8, num, den)),
        }
    }
    let (threshold, _, _) = best.expect("two occupied bins give a proper split");
    Ok(Otsu {
        threshold,
        degenerate: false,
    })
}

/// Otsu threshold of an 8-bit gray image.
pub fn otsu_threshold(image: &RasterImage) -> Result<Otsu> {
    let bytes = image
        .bytes()
        .filter(|_| image.channels() == 1)
        .ok_or_else(|| Error::input("otsu_threshold expects an 8-bit gray image"))?;
    otsu_from_histogram(&histogram(bytes))
}

pub fn histogram(bytes: &[u8]) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &b in bytes {
        hist[b as usize] += 1;
    }
    hist
}

/// Quantises a unit-float gray image to bytes with `round(v · 255)`.
pub fn to_gray8(image: &RasterImage) -> Result<RasterImage> {
    let src = image
        .floats()
        .filter(|_| image.channels() == 1)
        .ok_or_else(|| Error::input("expected a unit-float gray image"))?;
    let bytes = src.iter().map(|v| (v * 255.0).round() as u8).collect();
    RasterImage::gray8(image.width(), image.height(), image.resolution(), bytes)
}

const FAR: i64 = i64::MAX / 4;

/// Squared Euclidean distance from every pixel to the nearest `true` pixel
/// of `features`; `FAR` when there is none.
fn squared_edt(features: &[bool], width: usize, height: usize) -> Vec<i64> {
    // vertical distances, two sweeps
    let mut col = vec![FAR; width * height];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            col[i] = if features[i] {
                0
            } else if y > 0 && col[i - width] < FAR {
                col[i - width] + 1
            } else {
                FAR
            };
        }
    }
    for y in (0..height.saturating_sub(1)).rev() {
        for x in 0..width {
            let i = y * width + x;
            let below = col[i + width];
            if below < FAR && below + 1 < col[i] {
                col[i] = below + 1;
            }
        }
    }

    let mut out = vec![FAR; width * height];
    out.par_chunks_mut(width)
        .zip(col.par_chunks(width))
        .for_each_init(
            || (Vec::with_capacity(width), Vec::with_capacity(width)),
            |(sites, values), (row, g)| {
                lower_envelope(g, row, sites, values);
            },
        );
    out
}

/// Row pass of the Felzenszwalb–Huttenlocher transform with exact integer
/// breakpoint comparisons.
fn lower_envelope(g: &[i64], out: &mut [i64], sites: &mut Vec<i64>, values: &mut Vec<i64>) {
    sites.clear();
    values.clear();
    // F(q) = f(q) + q², where f = squared vertical distance
    for (q, &gq) in g.iter().enumerate() {
        if gq >= FAR {
            continue;
        }
        let q = q as i64;
        let fq = gq * gq + q * q;
        while let (Some(&v), Some(&fv)) = (sites.last(), values.last()) {
            if sites.len() < 2 {
                break;
            }
            let (u, fu) = (sites[sites.len() - 2], values[values.len() - 2]);
            // drop v when its parabola is never the minimum:
            // breakpoint(q, v) ≤ breakpoint(v, u)
            let lhs = (fq - fv) as i128 * (v - u) as i128;
            let rhs = (fv - fu) as i128 * (q - v) as i128;
            if lhs <= rhs {
                sites.pop();
                values.pop();
            } else {
                break;
            }
        }
        sites.push(q);
        values.push(fq);
    }
    if sites.is_empty() {
        out.fill(FAR);
        return;
    }
    let mut k = 0;
    for (x, o) in out.iter_mut().enumerate() {
        let x = x as i64;
        // advance while breakpoint(k+1, k) < x, i.e. F(k+1) − F(k) < 2x·(v(k+1) − v(k))
        while k + 1 < sites.len()
            && ((values[k + 1] - values[k]) as i128)
                < 2 * x as i128 * (sites[k + 1] - sites[k]) as i128
        {
            k += 1;
        }
        let d = x - sites[k];
        *o = d * d + values[k] - sites[k] * sites[k];
    }
}

pub fn dilate(mask: &BinaryMask, kernel: DiskKernel) -> BinaryMask {
    if kernel.radius == 0 {
        return mask.clone();
    }
    let (w, h) = mask.dims();
    let r2 = (kernel.radius as i64).pow(2);
    let dist = squared_edt(mask.bits(), w, h);
    let bits = dist.into_iter().map(|d| d <= r2).collect();
    BinaryMask::from_bits(w, h, mask.resolution(), bits).expect("same dims")
}

pub fn erode(mask: &BinaryMask, kernel: DiskKernel) -> BinaryMask {
    if kernel.radius == 0 {
        return mask.clone();
    }
    let (w, h) = mask.dims();
    let r2 = (kernel.radius as i64).pow(2);
    let background: Vec<bool> = mask.bits().iter().map(|&b| !b).collect();
    let dist = squared_edt(&background, w, h);
    let bits = dist
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            // nearest pixel beyond the border is axis-aligned
            let edge = (x + 1).min(w as i64 - x).min(y + 1).min(h as i64 - y);
            d.min(edge * edge) > r2
        })
        .collect();
    BinaryMask::from_bits(w, h, mask.resolution(), bits).expect("same dims")
}

pub fn binary_morph(mask: &BinaryMask, op: MorphOp, kernel: DiskKernel) -> BinaryMask {
    match op {
        MorphOp::Erode => erode(mask, kernel),
        MorphOp::Dilate => dilate(mask, kernel),
        MorphOp::Open => dilate(&erode(mask, kernel), kernel),
        MorphOp::Close => erode(&dilate(mask, kernel), kernel),
    }
}
