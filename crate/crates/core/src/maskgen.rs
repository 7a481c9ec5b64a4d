//! Annotation-free epithelium reference masks from cytokeratin IHC.
//!
//! A coarse map is computed on a downsampled copy of the IHC region
//! (deconvolution, blur, Otsu, closing). Full-resolution tiles whose map
//! coverage reaches `min_tile_fraction` are refined with a fixed DAB
//! threshold, an opening and a large closing, then OR-ed into the output.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    downsample_source, make_tile_grid, BinaryMask, RasterImage, RegionSource, Resolution, TileGrid,
    TileRect,
};
use crate::morphology::{
    binary_morph, gaussian_blur, otsu_threshold, to_gray8, DiskKernel, MorphOp, Otsu,
};
use crate::stain::{stain_gray, StainMatrix, DEFAULT_SATURATION, WHITE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskGenParams {
    pub lowres_microns_per_pixel: f64,
    pub blur_sigma_px: f64,
    pub min_tile_fraction: f64,
    /// Threshold on the normalised DAB channel at full resolution.
    pub fullres_threshold: f64,
    pub open_radius_px: u32,
    pub close_radius_px: u32,
    pub tile_size: usize,
    pub overlap: usize,
    pub target_stain: String,
    pub dab_saturation: f64,
    pub background_rgb: [u8; 3],
}

impl Default for MaskGenParams {
    fn default() -> Self {
        MaskGenParams {
            lowres_microns_per_pixel: 8.0,
            blur_sigma_px: 2.0,
            min_tile_fraction: 0.05,
            fullres_threshold: 0.15,
            open_radius_px: 4,
            close_radius_px: 30,
            tile_size: 1024,
            overlap: 128,
            target_stain: "dab".into(),
            dab_saturation: DEFAULT_SATURATION,
            background_rgb: WHITE,
        }
    }
}

impl MaskGenParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.min_tile_fraction > 0.0 && self.min_tile_fraction < 1.0) {
            return fail(format!(
                "min_tile_fraction must be in (0, 1), got {}",
                self.min_tile_fraction
            ));
        }
        if !(self.fullres_threshold > 0.0 && self.fullres_threshold < 1.0) {
            return fail(format!(
                "fullres_threshold must be in (0, 1), got {}",
                self.fullres_threshold
            ));
        }
        if !(self.blur_sigma_px.is_finite() && self.blur_sigma_px >= 0.0) {
            return fail(format!(
                "blur_sigma_px must be ≥ 0, got {}",
                self.blur_sigma_px
            ));
        }
        if !(self.dab_saturation.is_finite() && self.dab_saturation > 0.0) {
            return fail(format!(
                "dab_saturation must be positive, got {}",
                self.dab_saturation
            ));
        }
        Resolution::new(self.lowres_microns_per_pixel)?;
        if self.tile_size == 0 || self.overlap >= self.tile_size {
            return fail(format!(
                "need tile_size > overlap, got {} / {}",
                self.tile_size, self.overlap
            ));
        }
        if self.background_rgb.contains(&0) {
            return fail("background_rgb components must be ≥ 1".into());
        }
        Ok(())
    }

    fn dab_gray(&self, image: &RasterImage, m: &StainMatrix) -> Result<RasterImage> {
        stain_gray(
            image,
            self.background_rgb,
            m,
            &self.target_stain,
            self.dab_saturation,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskWarning {
    /// The low-resolution map is empty.
    NoStainDetected,
    /// Otsu saw a single intensity; the map fell back to `fullres_threshold`.
    DegenerateHistogram,
}

impl MaskWarning {
    pub fn code(self) -> &'static str {
        match self {
            MaskWarning::NoStainDetected => "no_stain_detected",
            MaskWarning::DegenerateHistogram => "degenerate_histogram",
        }
    }
}

#[derive(Debug, Clone)]
pub struct IhcMap {
    pub mask: BinaryMask,
    pub otsu: Otsu,
    pub close_radius_px: u32,
    pub warnings: Vec<MaskWarning>,
}

/// Closing radius at map scale: `max(1, round(close_radius_px × full / low))`.
pub fn lowres_close_radius(p: &MaskGenParams, fullres: Resolution, lowres: Resolution) -> u32 {
    let scaled =
        p.close_radius_px as f64 * fullres.microns_per_pixel() / lowres.microns_per_pixel();
    (scaled.round() as u32).max(1)
}

/// Low-resolution IHC map of a downsampled region.
///
/// `fullres` is the resolution the closing radius in `p` refers to. A blank
/// or uniformly stained input has a single-bin histogram; such maps are
/// decided by comparing that value with `p.fullres_threshold`.
pub fn build_ihc_map(
    ihc_lowres: &RasterImage,
    fullres: Resolution,
    p: &MaskGenParams,
    m: &StainMatrix,
) -> Result<IhcMap> {
    p.validate()?;
    let gray = p.dab_gray(ihc_lowres, m)?;
    let blurred = gaussian_blur(&gray, p.blur_sigma_px)?;
    let quantized = to_gray8(&blurred)?;
    let otsu = otsu_threshold(&quantized)?;
    let bytes = quantized.bytes().expect("gray8");
    let mut warnings = Vec::new();
    let (w, h) = quantized.dims();
    let bits = if otsu.degenerate {
        warnings.push(MaskWarning::DegenerateHistogram);
        let on = otsu.threshold as f64 / 255.0 > p.fullres_threshold;
        vec![on; w * h]
    } else {
        bytes.iter().map(|&b| b > otsu.threshold).collect()
    };
    let raw = BinaryMask::from_bits(w, h, ihc_lowres.resolution(), bits)?;
    let close_radius_px = lowres_close_radius(p, fullres, ihc_lowres.resolution());
    let mask = binary_morph(&raw, MorphOp::Close, DiskKernel::new(close_radius_px));
    if mask.is_empty() {
        warnings.push(MaskWarning::NoStainDetected);
    }
    Ok(IhcMap {
        mask,
        otsu,
        close_radius_px,
        warnings,
    })
}

fn selected_indices<'a>(
    map: &'a BinaryMask,
    rects: impl IntoIterator<Item = TileRect> + 'a,
    min_fraction: f64,
) -> impl Iterator<Item = usize> + 'a {
    let (w, h) = map.dims();
    let bounds = TileRect::new(0, 0, w, h);
    rects.into_iter().enumerate().filter_map(move |(i, rect)| {
        let area = rect.area();
        let count = rect.intersection(&bounds).map_or(0, |r| map.count_in(r));
        (area > 0 && count as f64 / area as f64 >= min_fraction).then_some(i)
    })
}

/// Tiles whose foreground fraction in `map` is at least `min_fraction`, in
/// grid order. The grid must already be expressed in map coordinates.
pub fn select_patches(map: &BinaryMask, grid: &TileGrid, min_fraction: f64) -> Vec<TileRect> {
    selected_indices(map, grid.tiles().iter().copied(), min_fraction)
        .map(|i| grid.tiles()[i])
        .collect()
}

/// Full-resolution refinement of one IHC patch: fixed DAB threshold, opening,
/// closing.
pub fn refine_patch(patch: &RasterImage, p: &MaskGenParams, m: &StainMatrix) -> Result<BinaryMask> {
    p.validate()?;
    let gray = p.dab_gray(patch, m)?;
    let bits = gray
        .floats()
        .expect("gray")
        .iter()
        .map(|&v| v > p.fullres_threshold)
        .collect();
    let raw = BinaryMask::from_bits(patch.width(), patch.height(), patch.resolution(), bits)?;
    let opened = binary_morph(&raw, MorphOp::Open, DiskKernel::new(p.open_radius_px));
    Ok(binary_morph(
        &opened,
        MorphOp::Close,
        DiskKernel::new(p.close_radius_px),
    ))
}

#[derive(Debug, Clone)]
pub struct ReferenceMask {
    pub mask: BinaryMask,
    pub ihc_map: IhcMap,
    /// Full-resolution tiles that were refined, in grid order.
    pub selected: Vec<TileRect>,
    pub grid_len: usize,
}

impl ReferenceMask {
    pub fn warnings(&self) -> &[MaskWarning] {
        &self.ihc_map.warnings
    }
}

/// Map rectangle covering a full-resolution tile.
fn to_map_rect(tile: TileRect, factor: usize, map_dims: (usize, usize)) -> TileRect {
    let x0 = tile.x / factor;
    let y0 = tile.y / factor;
    let x1 = (tile.x + tile.w).div_ceil(factor).min(map_dims.0);
    let y1 = (tile.y + tile.h).div_ceil(factor).min(map_dims.1);
    TileRect::new(x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0))
}

/// Runs the whole pipeline over a region source at full resolution.
///
/// Selected tiles are refined in parallel and stitched with a logical OR,
/// so the result does not depend on evaluation order.
pub fn generate_reference_mask(
    source: &dyn RegionSource,
    p: &MaskGenParams,
    m: &StainMatrix,
) -> Result<ReferenceMask> {
    p.validate()?;
    m.index_of(&p.target_stain)?;
    let fullres = source.resolution();
    let factor = (p.lowres_microns_per_pixel / fullres.microns_per_pixel())
        .round()
        .max(1.0) as usize;
    let lowres = downsample_source(source, factor)?;
    let ihc_map = build_ihc_map(&lowres, fullres, p, m)?;

    let dims = source.dims();
    let grid = make_tile_grid(dims, p.tile_size, p.overlap)?;
    let map_dims = ihc_map.mask.dims();
    let map_rects = grid
        .tiles()
        .iter()
        .map(|&t| to_map_rect(t, factor, map_dims));
    let selected: Vec<TileRect> = selected_indices(&ihc_map.mask, map_rects, p.min_tile_fraction)
        .map(|i| grid.tiles()[i])
        .collect();

    let refined = selected
        .par_iter()
        .map(|&rect| refine_patch(&source.read_region(rect)?, p, m))
        .collect::<Result<Vec<_>>>()?;
    let mut mask = BinaryMask::empty(dims.0, dims.1, fullres);
    for (rect, patch) in selected.iter().zip(&refined) {
        mask.or_patch(patch, rect.x, rect.y)?;
    }
    Ok(ReferenceMask {
        mask,
        ihc_map,
        selected,
        grid_len: grid.len(),
    })
}
