//! Fusion of tiled model outputs into the ROI frame.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, Resolution, TileRect};

/// Full-scale value of a probability quantum.
pub const PROBABILITY_SCALE: f64 = 65535.0;

/// Segmentation output of one tile, stored as 16-bit quanta
/// (`probability = quantum / 65535`), the precision of the tile files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbabilityTile {
    rect: TileRect,
    quanta: Vec<u16>,
}

impl ProbabilityTile {
    pub fn from_quanta(rect: TileRect, quanta: Vec<u16>) -> Result<Self> {
        if quanta.len() != rect.area() {
            return Err(Error::input(format!(
                "tile {rect:?} has {} values, expected {}",
                quanta.len(),
                rect.area()
            )));
        }
        Ok(ProbabilityTile { rect, quanta })
    }

    /// Quantises unit-interval probabilities to the nearest 1/65535.
    pub fn from_probabilities(rect: TileRect, values: &[f64]) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::input(format!("probability {v} outside [0, 1]")));
        }
        let quanta = values
            .iter()
            .map(|v| (v * PROBABILITY_SCALE).round() as u16)
            .collect();
        Self::from_quanta(rect, quanta)
    }

    /// Tile whose values come from a per-pixel function of ROI coordinates.
    pub fn from_fn(rect: TileRect, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let values: Vec<f64> = (rect.y..rect.y + rect.h)
            .flat_map(|y| (rect.x..rect.x + rect.w).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::from_probabilities(rect, &values)
    }

    pub fn rect(&self) -> TileRect {
        self.rect
    }

    pub fn quanta(&self) -> &[u16] {
        &self.quanta
    }

    /// Probability at tile-local `(x, y)`.
    pub fn probability(&self, x: usize, y: usize) -> f64 {
        self.quanta[y * self.rect.w + x] as f64 / PROBABILITY_SCALE
    }
}

/// Averages overlapping tiles and thresholds the mean (inclusive `≥`).
///
/// Pixels covered by no tile have probability 0. Sums are exact integers,
/// so the mask does not depend on tile order.
pub fn stitch_probabilities(
    tiles: &[ProbabilityTile],
    out_dims: (usize, usize),
    threshold: f64,
    resolution: Resolution,
) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::param(format!(
            "probability threshold must be in (0, 1], got {threshold}"
        )));
    }
    let (w, h) = out_dims;
    if let Some(t) = tiles.iter().find(|t| !t.rect.fits_in(w, h)) {
        return Err(Error::input(format!(
            "tile {:?} outside {w}×{h} output",
            t.rect
        )));
    }
    let cut = threshold * PROBABILITY_SCALE;
    let mut bits = vec![false; w * h];
    if w == 0 {
        return BinaryMask::from_bits(w, h, resolution, bits);
    }
    bits.par_chunks_mut(w).enumerate().for_each_init(
        || (vec![0u64; w], vec![0u32; w]),
        |(sum, count), (y, row)| {
            sum.fill(0);
            count.fill(0);
            for tile in tiles
                .iter()
                .filter(|t| y >= t.rect.y && y < t.rect.y + t.rect.h)
            {
                let r = tile.rect;
                let src = &tile.quanta[(y - r.y) * r.w..(y - r.y + 1) * r.w];
                for (i, &q) in src.iter().enumerate() {
                    sum[r.x + i] += q as u64;
                    count[r.x + i] += 1;
                }
            }
            for x in 0..w {
                row[x] = count[x] > 0 && sum[x] as f64 / count[x] as f64 >= cut;
            }
        },
    );
    BinaryMask::from_bits(w, h, resolution, bits)
}

/// Axis-aligned box in level-0 pixels with a confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl Detection {
    pub fn new(x: f64, y: f64, w: f64, h: f64, score: f64) -> Result<Self> {
        let d = Detection { x, y, w, h, score };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x, self.y, self.w, self.h, self.score]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::input("detection has a non-finite field"));
        }
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(Error::input(format!(
                "detection needs w, h > 0, got {}×{}",
                self.w, self.h
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::input(format!(
                "detection score {} outside [0, 1]",
                self.score
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Detection {
        Detection {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }
}

/// Intersection over union of two boxes.
pub fn box_iou(a: &Detection, b: &Detection) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Score descending, then `(y, x, w, h)` ascending.
fn nms_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.y.total_cmp(&b.y))
        .then(a.x.total_cmp(&b.x))
        .then(a.w.total_cmp(&b.w))
        .then(a.h.total_cmp(&b.h))
}

/// Greedy non-maximum suppression: a box survives iff its IoU with every
/// already kept box is below `iou_threshold`.
pub fn non_max_suppression(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(nms_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| box_iou(k, &d) < iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Moves per-tile detections into the ROI frame and removes duplicates
/// reported by overlapping tiles.
pub fn fuse_detections(
    per_tile: &[(TileRect, Vec<Detection>)],
    iou_threshold: f64,
) -> Vec<Detection> {
    let global = per_tile
        .iter()
        .flat_map(|(rect, dets)| {
            dets.iter()
                .map(move |d| d.translated(rect.x as f64, rect.y as f64))
        })
        .collect();
    non_max_suppression(global, iou_threshold)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterResult {
    pub kept: Vec<Detection>,
    pub rejected: Vec<Detection>,
}

/// Mask pixel `floor(center × mask_scale)` of a detection, if inside the mask.
pub fn mask_pixel(
    d: &Detection,
    mask_dims: (usize, usize),
    mask_scale: f64,
) -> Option<(usize, usize)> {
    let (cx, cy) = d.center();
    let (mx, my) = ((cx * mask_scale).floor(), (cy * mask_scale).floor());
    (mx >= 0.0 && my >= 0.0 && mx < mask_dims.0 as f64 && my < mask_dims.1 as f64)
        .then_some((mx as usize, my as usize))
}

/// Keeps detections whose centre falls on epithelium.
///
/// `mask_scale` converts detection coordinates into mask pixels (0.5 for
/// 0.25 µm/px detections against a 0.5 µm/px mask). Centres outside the
/// mask are rejected. Both lists preserve input order.
pub fn filter_by_mask(dets: &[Detection], mask: &BinaryMask, mask_scale: f64) -> FilterResult {
    let (kept, rejected) = dets
        .iter()
        .partition(|d| mask_pixel(d, mask.dims(), mask_scale).is_some_and(|(x, y)| mask.get(x, y)));
    FilterResult { kept, rejected }
}
