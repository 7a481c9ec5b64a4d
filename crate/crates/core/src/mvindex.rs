//! The volume-corrected mitotic index.
//!
//! For fields `i = 1..n` with mitotic count `MCᵢ` and epithelial volume
//! fraction `Vvᵢ` (per cent), the index is `k · Σ MCᵢ / Vvᵢ`. The digital
//! form uses `k = 100 / A` with `A` the evaluated area in mm², which makes a
//! fully epithelial region report mitoses per mm².

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{mask_pixel, Detection};
use crate::imaging::{BinaryMask, Resolution, TileRect};

/// Area of ten 40× high power fields at field number 22 mm.
pub const TEN_HPF_AREA_MM2: f64 = 2.37;
pub const TEN_HPF_FIELDS: usize = 10;
/// Point count of the ROI-sized Weibel grid.
pub const WEIBEL_POINTS: usize = 432;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiSpec {
    pub area_mm2: f64,
    /// Resolution of the detection (level-0) frame.
    pub microns_per_pixel: Resolution,
    pub n_fields: usize,
}

impl Default for RoiSpec {
    fn default() -> Self {
        RoiSpec {
            area_mm2: TEN_HPF_AREA_MM2,
            microns_per_pixel: Resolution::SCAN_40X,
            n_fields: TEN_HPF_FIELDS,
        }
    }
}

impl RoiSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.area_mm2.is_finite() && self.area_mm2 > 0.0) {
            return Err(Error::param(format!(
                "area_mm2 must be positive, got {}",
                self.area_mm2
            )));
        }
        if self.n_fields == 0 {
            return Err(Error::param("n_fields must be ≥ 1"));
        }
        Ok(())
    }
}

/// `k = 100 / A`.
pub fn k_coefficient(area_mm2: f64) -> Result<f64> {
    if !(area_mm2.is_finite() && area_mm2 > 0.0) {
        return Err(Error::param(format!(
            "area must be positive, got {area_mm2} mm²"
        )));
    }
    Ok(100.0 / area_mm2)
}

/// Percentage of foreground pixels inside `region`.
pub fn epithelium_fraction(mask: &BinaryMask, region: TileRect) -> Result<f64> {
    if region.area() == 0 {
        return Err(Error::param("epithelium_fraction over an empty region"));
    }
    if !region.fits_in(mask.width(), mask.height()) {
        return Err(Error::input(format!(
            "region {region:?} outside {:?} mask",
            mask.dims()
        )));
    }
    Ok(100.0 * mask.count_in(region) as f64 / region.area() as f64)
}

fn check_vv(vv_percent: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&vv_percent) {
        return Err(Error::param(format!(
            "Vv must be a percentage, got {vv_percent}"
        )));
    }
    Ok(())
}

/// `k · MC / Vv` for one region.
///
/// Evaluated as `MC / (Vv / k)`: with `k = 100 / A` and `Vv = 100` the
/// divisor rounds back to `A`, so the result is `MC / A` to the last bit.
pub fn mv_index_single(mc: u64, vv_percent: f64, k: f64) -> Result<f64> {
    check_vv(vv_percent)?;
    if vv_percent == 0.0 {
        return Err(Error::UndefinedIndex);
    }
    Ok(mc as f64 / (vv_percent / k))
}

/// `k · Σ MCᵢ / Vvᵢ`. Fields without epithelium and without mitoses are
/// skipped; mitoses in a field without epithelium are an error.
pub fn mv_index_fields(fields: &[(u64, f64)], k: f64) -> Result<f64> {
    let mut total = 0.0;
    for (index, &(mc, vv)) in fields.iter().enumerate() {
        check_vv(vv)?;
        if vv == 0.0 {
            if mc > 0 {
                return Err(Error::InconsistentField { index, mc });
            }
            continue;
        }
        total += mc as f64 / (vv / k);
    }
    Ok(total)
}

/// Regular point lattice with a shared sub-cell offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeibelGrid {
    pub n_points: usize,
    /// Position of each point inside its lattice cell, in `[0, 1)²`.
    pub offset: (f64, f64),
}

impl Default for WeibelGrid {
    fn default() -> Self {
        WeibelGrid {
            n_points: WEIBEL_POINTS,
            offset: (0.5, 0.5),
        }
    }
}

/// `max(a, b) / min(a, b)` compared exactly: is `a/b` further from 1 than `c/d`?
fn skew_cmp(a: u128, b: u128, c: u128, d: u128) -> std::cmp::Ordering {
    let (p, q) = (a.max(b), a.min(b));
    let (r, s) = (c.max(d), c.min(d));
    (p * s).cmp(&(r * q))
}

/// Rows × columns of the lattice for `n` points over a `width × height` region.
///
/// Among layouts whose cells have an aspect ratio within 2:1, the one with
/// the fewest surplus points wins, then the squarest cells, then fewer rows.
pub fn lattice_shape(n: usize, width: usize, height: usize) -> (usize, usize) {
    let (w, h) = (width as u128, height as u128);
    let mut best: Option<(bool, usize, usize, usize)> = None;
    for rows in 1..=n {
        let cols = n.div_ceil(rows);
        // cell aspect (w / cols) / (h / rows) = w·rows / (h·cols)
        let (a, b) = (w * rows as u128, h * cols as u128);
        let near_square = a <= 2 * b && b <= 2 * a;
        let surplus = rows * cols - n;
        let better = match best {
            None => true,
            Some((bsq, bsur, brows, bcols)) => {
                let skew = skew_cmp(a, b, w * brows as u128, h * bcols as u128);
                if near_square != bsq {
                    near_square
                } else if near_square && surplus != bsur {
                    surplus < bsur
                } else if skew.is_ne() {
                    skew.is_lt()
                } else {
                    surplus < bsur
                }
            }
        };
        if better {
            best = Some((near_square, surplus, rows, cols));
        }
    }
    let (_, _, rows, cols) = best.expect("n ≥ 1");
    (rows, cols)
}

impl WeibelGrid {
    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 {
            return Err(Error::param("Weibel grid needs at least one point"));
        }
        let (dx, dy) = self.offset;
        if !((0.0..1.0).contains(&dx) && (0.0..1.0).contains(&dy)) {
            return Err(Error::param(format!(
                "grid offset {:?} outside [0, 1)²",
                self.offset
            )));
        }
        Ok(())
    }

    /// Pixel positions of the grid points, row-major; surplus lattice points
    /// are dropped from the end.
    pub fn points(&self, width: usize, height: usize) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        if width == 0 || height == 0 {
            return Err(Error::param("Weibel grid over an empty region"));
        }
        let (rows, cols) = lattice_shape(self.n_points, width, height);
        let (dx, dy) = self.offset;
        let cell_w = width as f64 / cols as f64;
        let cell_h = height as f64 / rows as f64;
        let pixel = |cell: usize, off: f64, size: f64, len: usize| {
            (((cell as f64 + off) * size).floor() as usize).min(len - 1)
        };
        Ok((0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .take(self.n_points)
            .map(|(r, c)| (pixel(c, dx, cell_w, width), pixel(r, dy, cell_h, height)))
            .collect())
    }
}

/// Fraction of grid points that land on foreground.
pub fn weibel_estimate(mask: &BinaryMask, grid: &WeibelGrid) -> Result<f64> {
    let points = grid.points(mask.width(), mask.height())?;
    let hits = points.iter().filter(|&&(x, y)| mask.get(x, y)).count();
    Ok(hits as f64 / grid.n_points as f64)
}

/// Rows × columns for `n` equal fields: the most square factorisation with
/// rows ≤ columns (2 × 5 for ten fields).
pub fn field_layout(n: usize) -> (usize, usize) {
    let rows = (1..=n)
        .take_while(|r| r * r <= n)
        .filter(|r| n.is_multiple_of(*r))
        .last()
        .unwrap_or(1);
    (rows, n / rows)
}

/// Row-major field rectangles partitioning a `width × height` raster.
pub fn field_rects(width: usize, height: usize, n: usize) -> Vec<TileRect> {
    let (rows, cols) = field_layout(n);
    let edge = |i: usize, len: usize, parts: usize| i * len / parts;
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| {
            let (x0, x1) = (edge(c, width, cols), edge(c + 1, width, cols));
            let (y0, y1) = (edge(r, height, rows), edge(r + 1, height, rows));
            TileRect::new(x0, y0, x1 - x0, y1 - y0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldResult {
    pub index: usize,
    pub mc: u64,
    pub vv_percent: f64,
    /// `None` when the field holds no epithelium.
    pub mv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MvReport {
    pub k: f64,
    pub area_mm2: f64,
    pub mc_total: u64,
    pub mc_kept: u64,
    pub vv_percent_mean: f64,
    pub vv_percent_std: f64,
    /// Mean and population standard deviation over fields with a defined index.
    pub mv_mean: f64,
    pub mv_std: f64,
    pub mv_whole_roi: f64,
    pub det_threshold: f64,
    pub fields: Vec<FieldResult>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-field and whole-ROI index for an epithelium mask and detections.
///
/// `all` are the detections counted before mask filtering, `kept` those on
/// epithelium. Fields are laid out over the mask; a detection belongs to the
/// field holding its mask pixel. Each field uses `k = 100 / (A / n)`.
pub fn build_report(
    mask: &BinaryMask,
    kept: &[Detection],
    all: &[Detection],
    roi: &RoiSpec,
    det_threshold: f64,
) -> Result<MvReport> {
    roi.validate()?;
    let k = k_coefficient(roi.area_mm2)?;
    let k_field = k_coefficient(roi.area_mm2 / roi.n_fields as f64)?;
    let mask_scale =
        roi.microns_per_pixel.microns_per_pixel() / mask.resolution().microns_per_pixel();
    let (w, h) = mask.dims();
    let rects = field_rects(w, h, roi.n_fields);
    if rects.iter().any(|r| r.area() == 0) {
        return Err(Error::input(format!(
            "{w}×{h} mask is too small for {} fields",
            roi.n_fields
        )));
    }

    let mut counts = vec![0u64; rects.len()];
    for d in kept {
        if let Some((x, y)) = mask_pixel(d, mask.dims(), mask_scale) {
            if let Some(i) = rects.iter().position(|r| r.contains(x, y)) {
                counts[i] += 1;
            }
        }
    }

    let mut fields = Vec::with_capacity(rects.len());
    for (index, (rect, &mc)) in rects.iter().zip(&counts).enumerate() {
        let vv_percent = epithelium_fraction(mask, *rect)?;
        let mv = if vv_percent > 0.0 {
            Some(mv_index_single(mc, vv_percent, k_field)?)
        } else if mc > 0 {
            return Err(Error::InconsistentField { index, mc });
        } else {
            None
        };
        fields.push(FieldResult {
            index,
            mc,
            vv_percent,
            mv,
        });
    }

    let vv: Vec<f64> = fields.iter().map(|f| f.vv_percent).collect();
    let mv: Vec<f64> = fields.iter().filter_map(|f| f.mv).collect();
    let (vv_percent_mean, vv_percent_std) = mean_std(&vv);
    let (mv_mean, mv_std) = mean_std(&mv);
    let vv_whole = epithelium_fraction(mask, TileRect::new(0, 0, w, h))?;
    let mc_kept = kept.len() as u64;
    let mv_whole_roi = mv_index_single(mc_kept, vv_whole, k)?;
    Ok(MvReport {
        k,
        area_mm2: roi.area_mm2,
        mc_total: all.len() as u64,
        mc_kept,
        vv_percent_mean,
        vv_percent_std,
        mv_mean,
        mv_std,
        mv_whole_roi,
        det_threshold,
        fields,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const RES: Resolution = Resolution::SCAN_40X;

    #[test]
    fn k_values() {
        assert!((k_coefficient(2.37).unwrap() - 42.194092827).abs() < 1e-9);
        assert_eq!(k_coefficient(100.0).unwrap(), 1.0);
        assert_eq!(k_coefficient(1.0).unwrap(), 100.0);
        assert!(k_coefficient(0.0).is_err());
        assert!(k_coefficient(-1.0).is_err());
    }

    #[test]
    fn fractions() {
        let full = BinaryMask::full(8, 8, RES);
        let r = TileRect::new(0, 0, 8, 8);
        assert_eq!(epithelium_fraction(&full, r).unwrap(), 100.0);
        assert_eq!(epithelium_fraction(&full.complement(), r).unwrap(), 0.0);
        let half = BinaryMask::from_fn(8, 8, RES, |x, _| x < 4);
        assert_eq!(epithelium_fraction(&half, r).unwrap(), 50.0);
        assert!(epithelium_fraction(&half, TileRect::new(0, 0, 0, 3)).is_err());
        assert!(epithelium_fraction(&half, TileRect::new(4, 0, 5, 3)).is_err());
    }

    #[test]
    fn single_index_examples() {
        let k = k_coefficient(2.37).unwrap();
        assert_eq!(mv_index_single(0, 40.0, k).unwrap(), 0.0);
        assert!((mv_index_single(24, 100.0, k).unwrap() - 24.0 / 2.37).abs() < 1e-12);
        assert!((mv_index_single(10, 50.0, k).unwrap() - 8.438818565).abs() < 1e-8);
        assert!(matches!(
            mv_index_single(3, 0.0, k),
            Err(Error::UndefinedIndex)
        ));
    }

    #[test]
    fn field_sum_examples() {
        let k = k_coefficient(2.37).unwrap();
        assert_eq!(
            mv_index_fields(&[(7, 35.0)], k).unwrap(),
            mv_index_single(7, 35.0, k).unwrap()
        );
        assert!((mv_index_fields(&[(5, 50.0), (5, 50.0)], 1.0).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(mv_index_fields(&[], k).unwrap(), 0.0);
        assert_eq!(mv_index_fields(&[(0, 0.0), (2, 20.0)], 1.0).unwrap(), 0.1);
        assert!(matches!(
            mv_index_fields(&[(1, 10.0), (2, 0.0)], 1.0),
            Err(Error::InconsistentField { index: 1, mc: 2 })
        ));
    }

    proptest! {
        #[test]
        fn index_homogeneity(mc in 0u64..500, vv in 1.0..50.0f64, c in 1u64..3, area in 0.1..10.0f64) {
            let k = k_coefficient(area).unwrap();
            prop_assert!((k * area - 100.0).abs() <= 1e-12 * 100.0);
            let base = mv_index_single(mc, vv, k).unwrap();
            let scaled = mv_index_single(c * mc, vv, k).unwrap();
            prop_assert!((scaled - c as f64 * base).abs() <= 1e-12 * scaled.abs().max(1.0));
            let thinned = mv_index_single(mc, vv * c as f64, k).unwrap();
            prop_assert!((thinned - base / c as f64).abs() <= 1e-12 * base.abs().max(1.0));
        }

        #[test]
        fn fraction_is_area_weighted(seed in any::<u64>(), split in 1usize..31) {
            let m = BinaryMask::from_fn(32, 20, RES, |x, y| (seed >> ((x * 5 + y * 3) % 64)) & 1 == 1);
            let whole = epithelium_fraction(&m, TileRect::new(0, 0, 32, 20)).unwrap();
            let left = epithelium_fraction(&m, TileRect::new(0, 0, split, 20)).unwrap();
            let right = epithelium_fraction(&m, TileRect::new(split, 0, 32 - split, 20)).unwrap();
            let weighted = (left * split as f64 + right * (32 - split) as f64) / 32.0;
            prop_assert!((weighted - whole).abs() < 1e-12);
        }
    }

    #[test]
    fn lattice_for_default_grid() {
        assert_eq!(lattice_shape(432, 6158, 6158), (18, 24));
        assert_eq!(lattice_shape(42, 100, 100), (6, 7));
        assert_eq!(lattice_shape(1, 10, 10), (1, 1));
        let (r, c) = lattice_shape(432, 8000, 2000);
        assert!(r * c >= 432 && c > r);
    }

    #[test]
    fn weibel_trivial_masks() {
        let g = WeibelGrid {
            n_points: 432,
            offset: (0.3, 0.7),
        };
        assert_eq!(
            weibel_estimate(&BinaryMask::full(500, 400, RES), &g).unwrap(),
            1.0
        );
        assert_eq!(
            weibel_estimate(&BinaryMask::empty(500, 400, RES), &g).unwrap(),
            0.0
        );
        let zero = WeibelGrid {
            n_points: 0,
            offset: (0.5, 0.5),
        };
        assert!(weibel_estimate(&BinaryMask::full(5, 5, RES), &zero).is_err());
        let bad = WeibelGrid {
            n_points: 4,
            offset: (1.0, 0.5),
        };
        assert!(weibel_estimate(&BinaryMask::full(5, 5, RES), &bad).is_err());
    }

    #[test]
    fn weibel_left_half() {
        let m = BinaryMask::from_fn(600, 600, RES, |x, _| x < 300);
        let g = WeibelGrid {
            n_points: 432,
            offset: (0.5, 0.5),
        };
        let (_, cols) = lattice_shape(432, 600, 600);
        assert_eq!(cols % 2, 0);
        assert_eq!(weibel_estimate(&m, &g).unwrap(), 0.5);
    }

    #[test]
    fn weibel_points_stay_inside() {
        for (w, h) in [(1, 1), (7, 3), (100, 37), (37, 100)] {
            for n in [1, 5, 42, 432] {
                let pts = WeibelGrid {
                    n_points: n,
                    offset: (0.999, 0.0),
                }
                .points(w, h)
                .unwrap();
                assert_eq!(pts.len(), n);
                assert!(pts.iter().all(|&(x, y)| x < w && y < h));
            }
        }
    }

    #[test]
    fn field_layouts() {
        assert_eq!(field_layout(10), (2, 5));
        assert_eq!(field_layout(1), (1, 1));
        assert_eq!(field_layout(2), (1, 2));
        assert_eq!(field_layout(12), (3, 4));
        assert_eq!(field_layout(7), (1, 7));
        let rects = field_rects(100, 40, 10);
        assert_eq!(rects[0], TileRect::new(0, 0, 20, 20));
        assert_eq!(rects[9], TileRect::new(80, 20, 20, 20));
        assert_eq!(rects.iter().map(|r| r.area()).sum::<usize>(), 4000);
    }

    fn det_at(cx: f64, cy: f64) -> Detection {
        Detection::new(cx - 5.0, cy - 5.0, 10.0, 10.0, 0.9).unwrap()
    }

    #[test]
    fn report_uniform_mask_no_detections() {
        let mask = BinaryMask::full(100, 40, RES);
        let r = build_report(&mask, &[], &[], &RoiSpec::default(), 0.5).unwrap();
        assert_eq!((r.mv_mean, r.mv_std, r.mv_whole_roi), (0.0, 0.0, 0.0));
        assert_eq!(r.vv_percent_mean, 100.0);
        assert_eq!(r.fields.len(), 10);
    }

    #[test]
    fn report_single_field() {
        let mask = BinaryMask::from_fn(50, 50, RES, |x, y| x + y < 60);
        let dets = [det_at(10.0, 10.0), det_at(20.0, 5.0), det_at(45.0, 45.0)];
        let roi = RoiSpec {
            n_fields: 1,
            ..RoiSpec::default()
        };
        let r = build_report(&mask, &dets[..2], &dets, &roi, 0.5).unwrap();
        assert_eq!(r.mv_std, 0.0);
        assert!((r.mv_mean - r.mv_whole_roi).abs() < 1e-12);
        assert_eq!((r.mc_total, r.mc_kept), (3, 2));
    }

    #[test]
    fn report_two_fields_percent_convention() {
        // left field: 2 mitoses, right field none, both half epithelium
        let mask = BinaryMask::from_fn(100, 50, RES, |_, y| y < 25);
        let kept = [det_at(10.0, 10.0), det_at(30.0, 12.0)];
        let roi = RoiSpec {
            n_fields: 2,
            ..RoiSpec::default()
        };
        let r = build_report(&mask, &kept, &kept, &roi, 0.5).unwrap();
        assert_eq!(r.fields[0].mc, 2);
        assert_eq!(r.fields[0].vv_percent, 50.0);
        let k_field = 100.0 / (2.37 / 2.0);
        let expected = k_field * 2.0 / 50.0;
        assert!((r.fields[0].mv.unwrap() - expected).abs() < 1e-12);
        assert!((r.mv_mean - expected / 2.0).abs() < 1e-12);
        assert!((r.mv_std - expected / 2.0).abs() < 1e-12);
    }

    #[test]
    fn report_without_epithelium_is_undefined() {
        let mask = BinaryMask::empty(100, 40, RES);
        assert!(matches!(
            build_report(&mask, &[], &[], &RoiSpec::default(), 0.5),
            Err(Error::UndefinedIndex)
        ));
    }

    #[test]
    fn report_maps_detections_through_mask_scale() {
        // mask at 0.5 µm/px; detections at 0.25 µm/px
        let mask = BinaryMask::full(100, 40, Resolution::SCAN_20X);
        let kept = [det_at(190.0, 70.0)];
        let r = build_report(&mask, &kept, &kept, &RoiSpec::default(), 0.5).unwrap();
        // (95, 35) lies in the last field
        assert_eq!(r.fields[9].mc, 1);
    }
}
