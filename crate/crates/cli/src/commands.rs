//! Subcommand implementations.

use std::collections::HashMap;
use std::path::Path;

use mvi_core::fusion::{
    filter_by_mask, non_max_suppression, stitch_probabilities, Detection, FilterResult,
};
use mvi_core::imaging::{BinaryMask, RasterImage, Resolution};
use mvi_core::io::{
    load_mask, load_mask_png, load_probability_tiles, load_rgb_png, read_detections, save_mask_png,
    save_rgb_png, Manifest, ManifestImage,
};
use mvi_core::maskgen::{generate_reference_mask, MaskGenParams};
use mvi_core::metrics::{dice_f1, iou, mae, pearson_r, render_overlay, PairedSeries};
use mvi_core::mvindex::{build_report, weibel_estimate, WeibelGrid};
use mvi_core::stain::{StainMatrix, WHITE};
use mvi_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::PipelineConfig;
use crate::error::{warn, CliError};
use crate::{report, EvalArgs, MaskgenArgs, MvindexArgs, OverlayArgs, WeibelArgs};

pub const KEPT_COLOR: [u8; 3] = [0, 200, 0];
pub const REJECTED_COLOR: [u8; 3] = [220, 0, 0];
const BOX_LINE_PX: usize = 2;

fn is_json(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::new("io_error", format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => write_file(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new("io_error", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn maskgen(a: &MaskgenArgs, config: &PipelineConfig) -> Result<(), CliError> {
    let stains = match &a.stains {
        Some(path) => StainMatrix::load(path)?,
        None => config.stain_matrix()?,
    };
    let params: MaskGenParams = match &a.params {
        Some(path) => load_json(path)?,
        None => config.maskgen.clone(),
    };
    params
        .validate()
        .map_err(|e| CliError::config(e.to_string()))?;
    if is_json(&a.out) {
        return Err(CliError::new(
            "usage",
            "--out must not be a .json path; the sidecar uses that name",
        ));
    }
    let source = ManifestImage::open(&a.ihc)?;
    let result = generate_reference_mask(&source, &params, &stains)?;
    save_mask_png(&result.mask, &a.out)?;

    let warnings: Vec<&str> = result.warnings().iter().map(|w| w.code()).collect();
    for code in &warnings {
        warn(code, format!("{}", a.ihc.display()));
    }
    let (w, h) = result.mask.dims();
    let sidecar = json!({
        "mask": a.out.file_name().map(|n| n.to_string_lossy().into_owned()),
        "width_px": w,
        "height_px": h,
        "microns_per_pixel": source.manifest().microns_per_pixel,
        "params": params,
        "stains": stains.to_config(),
        "otsu_threshold": result.ihc_map.otsu.threshold,
        "selected_tiles": result.selected.len(),
        "total_tiles": result.grid_len,
        "foreground_px": result.mask.count_foreground(),
        "warnings": warnings,
    });
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n";
    write_file(&a.out.with_extension("json"), &text)
}

/// Fails unless `dims` at `res` spans the ROI's physical extent to within
/// one pixel per axis.
fn check_extent(roi: &Manifest, dims: (usize, usize), res: Resolution) -> Result<(), CliError> {
    let roi_mpp = roi.microns_per_pixel.microns_per_pixel();
    let mpp = res.microns_per_pixel();
    let fits = |n: usize, roi_n: usize| (n as f64 * mpp - roi_n as f64 * roi_mpp).abs() <= mpp;
    if fits(dims.0, roi.width_px) && fits(dims.1, roi.height_px) {
        return Ok(());
    }
    Err(Error::ResolutionMismatch(format!(
        "segmentation {}×{} at {mpp} µm/px does not span the {}×{} ROI at {roi_mpp} µm/px",
        dims.0, dims.1, roi.width_px, roi.height_px
    ))
    .into())
}

fn load_segmentation(
    a: &MvindexArgs,
    roi: &Manifest,
    config: &PipelineConfig,
) -> Result<BinaryMask, CliError> {
    if is_json(&a.seg) {
        let tiles = load_probability_tiles(&a.seg)?;
        let res = tiles.manifest.microns_per_pixel;
        check_extent(roi, tiles.manifest.dims(), res)?;
        Ok(stitch_probabilities(
            &tiles.tiles,
            tiles.manifest.dims(),
            config.prob_threshold,
            res,
        )?)
    } else {
        let res = match a.seg_mpp {
            Some(mpp) => Resolution::new(mpp)?,
            None => roi.microns_per_pixel,
        };
        let mask = load_mask_png(&a.seg, res)?;
        check_extent(roi, mask.dims(), res)?;
        Ok(mask)
    }
}

fn outside(d: &Detection, w: usize, h: usize) -> bool {
    let (cx, cy) = d.center();
    !(cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64)
}

pub fn mvindex(a: &MvindexArgs, config: &PipelineConfig) -> Result<(), CliError> {
    let roi = Manifest::load(&a.roi)?;
    let det_threshold = a.det_threshold.unwrap_or(config.det_threshold);
    if !(0.0..=1.0).contains(&det_threshold) {
        return Err(CliError::new(
            "usage",
            format!("det_threshold must be in [0, 1], got {det_threshold}"),
        ));
    }
    let mut spec = config.roi;
    spec.microns_per_pixel = roi.microns_per_pixel;

    let mask = load_segmentation(a, &roi, config)?;
    let above: Vec<Detection> = read_detections(&a.dets)?
        .into_iter()
        .filter(|d| d.score >= det_threshold)
        .collect();
    let counted = non_max_suppression(above, config.nms_iou);
    let (w, h) = roi.dims();
    let off_roi = counted.iter().filter(|d| outside(d, w, h)).count();
    if off_roi > 0 {
        warn(
            "detections_outside_roi",
            format!("{off_roi} detection centre(s) outside the {w}×{h} ROI were rejected"),
        );
    }
    let scale = roi.microns_per_pixel.microns_per_pixel() / mask.resolution().microns_per_pixel();
    let FilterResult { kept, rejected } = filter_by_mask(&counted, &mask, scale);
    let result = build_report(&mask, &kept, &counted, &spec, det_threshold)?;
    emit(a.out.as_deref(), &report::to_json(&result))?;

    if let Some(path) = &a.overlay {
        let canvas = if roi.tiles.is_empty() {
            RasterImage::filled_rgb8(w, h, roi.microns_per_pixel, WHITE)
        } else {
            ManifestImage::open(&a.roi)?.read_all()?
        };
        let canvas = draw_boxes(&canvas, &rejected, REJECTED_COLOR)?;
        let canvas = draw_boxes(&canvas, &kept, KEPT_COLOR)?;
        save_rgb_png(&canvas, path)?;
    }
    Ok(())
}

/// Copy of an RGB image with box outlines `BOX_LINE_PX` wide, clipped to
/// the image.
pub fn draw_boxes(
    image: &RasterImage,
    dets: &[Detection],
    color: [u8; 3],
) -> Result<RasterImage, CliError> {
    let (w, h) = image.dims();
    let mut data = image
        .bytes()
        .filter(|_| image.channels() == 3)
        .ok_or_else(|| CliError::new("invalid_input", "overlay canvas must be 8-bit RGB"))?
        .to_vec();
    let clip = |v: f64, n: usize| v.clamp(0.0, n as f64) as usize;
    for d in dets {
        let (x0, x1) = (clip(d.x.floor(), w), clip((d.x + d.w).ceil(), w));
        let (y0, y1) = (clip(d.y.floor(), h), clip((d.y + d.h).ceil(), h));
        if x0 >= x1 || y0 >= y1 {
            continue;
        }
        for y in y0..y1 {
            for x in x0..x1 {
                let edge = x < x0 + BOX_LINE_PX
                    || x + BOX_LINE_PX >= x1
                    || y < y0 + BOX_LINE_PX
                    || y + BOX_LINE_PX >= y1;
                if edge {
                    data[(y * w + x) * 3..][..3].copy_from_slice(&color);
                }
            }
        }
    }
    Ok(RasterImage::rgb8(w, h, image.resolution(), data)?)
}

#[derive(Debug, Serialize)]
struct WeibelOutput {
    fraction: f64,
    n_points: usize,
    offset: [f64; 2],
}

pub fn weibel(a: &WeibelArgs, config: &PipelineConfig) -> Result<(), CliError> {
    let mask = load_mask(&a.mask, Resolution::SCAN_40X)?;
    let offset = a.offset.unwrap_or_else(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        (rng.gen(), rng.gen())
    });
    let grid = WeibelGrid {
        n_points: a.points,
        offset,
    };
    let fraction = weibel_estimate(&mask, &grid)?;
    let out = WeibelOutput {
        fraction,
        n_points: a.points,
        offset: [offset.0, offset.1],
    };
    println!("{}", serde_json::to_string(&out).expect("serializes"));
    Ok(())
}

#[derive(Debug, Default, Serialize)]
struct EvalOutput {
    iou: Option<f64>,
    dice_f1: Option<f64>,
    mae: Option<f64>,
    pearson_r: Option<f64>,
}

fn series_mismatch(detail: impl Into<String>) -> CliError {
    CliError::new("series_mismatch", detail)
}

/// Reads an `id,value` CSV.
pub fn read_series(path: &Path) -> Result<Vec<(String, f64)>, CliError> {
    let bad = |e: &dyn std::fmt::Display| {
        CliError::new("invalid_series", format!("{}: {e}", path.display()))
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(&e))?;
    let headers = reader.headers().map_err(|e| bad(&e))?;
    if headers.iter().collect::<Vec<_>>() != ["id", "value"] {
        return Err(bad(&"header must be `id,value`"));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad(&e))?;
        let value: f64 = record[1]
            .parse()
            .map_err(|e| bad(&format!("`{}`: {e}", &record[1])))?;
        rows.push((record[0].to_string(), value));
    }
    Ok(rows)
}

/// Pairs two series by id, in the order of `pred`.
pub fn pair_series(
    pred: &[(String, f64)],
    reference: &[(String, f64)],
) -> Result<PairedSeries, CliError> {
    let mut by_id = HashMap::with_capacity(reference.len());
    for (id, v) in reference {
        if by_id.insert(id.as_str(), *v).is_some() {
            return Err(series_mismatch(format!(
                "duplicate id `{id}` in reference series"
            )));
        }
    }
    if pred.len() != reference.len() {
        return Err(series_mismatch(format!(
            "{} predictions vs {} references",
            pred.len(),
            reference.len()
        )));
    }
    let mut p = Vec::with_capacity(pred.len());
    let mut r = Vec::with_capacity(pred.len());
    for (id, v) in pred {
        let Some(rv) = by_id.remove(id.as_str()) else {
            return Err(series_mismatch(format!(
                "id `{id}` missing from reference or repeated"
            )));
        };
        p.push(*v);
        r.push(rv);
    }
    PairedSeries::new(p, r).map_err(|e| series_mismatch(e.to_string()))
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let mut out = EvalOutput::default();
    match (&a.pred, &a.reference, &a.pred_series, &a.ref_series) {
        (Some(pred), Some(reference), None, None) => {
            let p = load_mask(pred, Resolution::SCAN_40X)?;
            let r = load_mask(reference, Resolution::SCAN_40X)?;
            out.iou = Some(iou(&p, &r)?);
            out.dice_f1 = Some(dice_f1(&p, &r)?);
        }
        (None, None, Some(pred), Some(reference)) => {
            let series = pair_series(&read_series(pred)?, &read_series(reference)?)?;
            out.mae = Some(mae(&series));
            out.pearson_r = match pearson_r(&series) {
                Ok(r) => Some(r),
                Err(Error::UndefinedCorrelation(why)) => {
                    warn("pearson_undefined", why);
                    None
                }
                Err(e) => return Err(e.into()),
            };
        }
        _ => {
            return Err(CliError::new(
                "usage",
                "give either --pred/--ref masks or --pred-series/--ref-series",
            ))
        }
    }
    println!("{}", serde_json::to_string(&out).expect("serializes"));
    Ok(())
}

pub fn overlay(a: &OverlayArgs, config: &PipelineConfig) -> Result<(), CliError> {
    let image = if is_json(&a.image) {
        ManifestImage::open(&a.image)?.read_all()?
    } else {
        load_rgb_png(&a.image, config.roi.microns_per_pixel)?
    };
    let pred = load_mask(&a.pred, image.resolution())?;
    let reference = load_mask(&a.reference, image.resolution())?;
    let out = render_overlay(&image, &pred, &reference)?;
    save_rgb_png(&out, &a.out)?;
    Ok(())
}
