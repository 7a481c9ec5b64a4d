//! File formats: tiled ROI manifests, PNG masks and probability tiles,
//! JSON Lines detections.
//!
//! A manifest describes a large raster as PNG tiles placed in ROI pixel
//! coordinates:
//!
//! ```json
//! { "width_px": 6158, "height_px": 6158, "microns_per_pixel": 0.25,
//!   "tiles": [{ "x": 0, "y": 0, "file": "tiles/0_0.png" }] }
//! ```
//!
//! Tile paths are relative to the manifest's directory.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Detection, ProbabilityTile};
use crate::imaging::{make_tile_grid, BinaryMask, RasterImage, RegionSource, Resolution, TileRect};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTile {
    pub x: usize,
    pub y: usize,
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub width_px: usize,
    pub height_px: usize,
    pub microns_per_pixel: Resolution,
    #[serde(default)]
    pub tiles: Vec<ManifestTile>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> Error + '_ {
    move |source| Error::Json {
        path: path.to_path_buf(),
        source,
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        if !path.is_file() {
            return Err(Error::ManifestNotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(json_err(path))?;
        if manifest.width_px == 0 || manifest.height_px == 0 {
            return Err(Error::input(format!("{}: empty raster", path.display())));
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(json_err(path))?;
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width_px, self.height_px)
    }
}

struct PlacedTile {
    rect: TileRect,
    path: PathBuf,
}

fn place_tiles(manifest: &Manifest, base: &Path) -> Result<Vec<PlacedTile>> {
    manifest
        .tiles
        .iter()
        .map(|t| {
            let path = base.join(&t.file);
            let (w, h) = image::image_dimensions(&path).map_err(image_err(&path))?;
            let rect = TileRect::new(t.x, t.y, w as usize, h as usize);
            if !rect.fits_in(manifest.width_px, manifest.height_px) {
                return Err(Error::input(format!(
                    "{}: tile {rect:?} outside {}×{} raster",
                    path.display(),
                    manifest.width_px,
                    manifest.height_px
                )));
            }
            Ok(PlacedTile { rect, path })
        })
        .collect()
}

/// RGB raster backed by a manifest of PNG tiles; tiles are decoded on demand.
pub struct ManifestImage {
    manifest: Manifest,
    tiles: Vec<PlacedTile>,
}

impl ManifestImage {
    pub fn open(path: &Path) -> Result<Self> {
        let manifest = Manifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let tiles = place_tiles(&manifest, base)?;
        Ok(ManifestImage { manifest, tiles })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn read_all(&self) -> Result<RasterImage> {
        self.read_region(TileRect::new(
            0,
            0,
            self.manifest.width_px,
            self.manifest.height_px,
        ))
    }
}

impl RegionSource for ManifestImage {
    fn dims(&self) -> (usize, usize) {
        self.manifest.dims()
    }

    fn resolution(&self) -> Resolution {
        self.manifest.microns_per_pixel
    }

    fn read_region(&self, rect: TileRect) -> Result<RasterImage> {
        let (w, h) = self.manifest.dims();
        if !rect.fits_in(w, h) {
            return Err(Error::input(format!(
                "region {rect:?} outside {w}×{h} raster"
            )));
        }
        let mut out = vec![0u8; rect.area() * 3];
        let mut covered = vec![false; rect.area()];
        for tile in &self.tiles {
            let Some(overlap) = tile.rect.intersection(&rect) else {
                continue;
            };
            let img = image::open(&tile.path)
                .map_err(image_err(&tile.path))?
                .into_rgb8();
            for y in overlap.y..overlap.y + overlap.h {
                let src_start = ((y - tile.rect.y) * tile.rect.w + overlap.x - tile.rect.x) * 3;
                let dst_start = ((y - rect.y) * rect.w + overlap.x - rect.x) * 3;
                out[dst_start..dst_start + overlap.w * 3]
                    .copy_from_slice(&img.as_raw()[src_start..src_start + overlap.w * 3]);
                let c = (y - rect.y) * rect.w + overlap.x - rect.x;
                covered[c..c + overlap.w].fill(true);
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::input(format!(
                "region {rect:?} is not fully covered by manifest tiles"
            )));
        }
        RasterImage::rgb8(rect.w, rect.h, self.manifest.microns_per_pixel, out)
    }
}

/// Writes `image` as `tile_size` PNG tiles plus `manifest.json` into `dir`.
pub fn write_tiled_rgb(image: &RasterImage, dir: &Path, tile_size: usize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let grid = make_tile_grid(image.dims(), tile_size, 0)?;
    let mut tiles = Vec::with_capacity(grid.len());
    for rect in grid.tiles() {
        let file = PathBuf::from(format!("tile_{}_{}.png", rect.x, rect.y));
        save_rgb_png(&image.crop(*rect)?, &dir.join(&file))?;
        tiles.push(ManifestTile {
            x: rect.x,
            y: rect.y,
            file,
        });
    }
    let manifest = Manifest {
        width_px: image.width(),
        height_px: image.height(),
        microns_per_pixel: image.resolution(),
        tiles,
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

pub fn load_rgb_png(path: &Path, resolution: Resolution) -> Result<RasterImage> {
    let img = image::open(path).map_err(image_err(path))?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    RasterImage::rgb8(w, h, resolution, img.into_raw())
}

pub fn save_rgb_png(image: &RasterImage, path: &Path) -> Result<()> {
    let bytes = image
        .bytes()
        .filter(|_| image.channels() == 3)
        .ok_or_else(|| Error::input("save_rgb_png expects an 8-bit RGB image"))?;
    let buf = RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes.to_vec())
        .expect("buffer length checked by RasterImage");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(image_err(path))
}

/// 8-bit mask PNG: values ≥ 128 are foreground.
pub fn load_mask_png(path: &Path, resolution: Resolution) -> Result<BinaryMask> {
    let img = image::open(path).map_err(image_err(path))?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bits = img.into_raw().into_iter().map(|v| v >= 128).collect();
    BinaryMask::from_bits(w, h, resolution, bits)
}

pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let buf = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.to_gray8())
        .expect("mask buffer length");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(image_err(path))
}

/// Mask from a single PNG, or from a manifest (`.json`) of mask PNG tiles.
///
/// `resolution` is used for PNG inputs; manifests carry their own.
pub fn load_mask(path: &Path, resolution: Resolution) -> Result<BinaryMask> {
    if path.extension().is_some_and(|e| e == "json") {
        let manifest = Manifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut mask = BinaryMask::empty(
            manifest.width_px,
            manifest.height_px,
            manifest.microns_per_pixel,
        );
        for tile in place_tiles(&manifest, base)? {
            let part = load_mask_png(&tile.path, manifest.microns_per_pixel)?;
            mask.or_patch(&part, tile.rect.x, tile.rect.y)?;
        }
        Ok(mask)
    } else {
        load_mask_png(path, resolution)
    }
}

/// Probability tiles listed in a manifest of 16-bit gray PNGs.
pub struct ProbabilityTiles {
    pub manifest: Manifest,
    pub tiles: Vec<ProbabilityTile>,
}

pub fn load_probability_tiles(path: &Path) -> Result<ProbabilityTiles> {
    let manifest = Manifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let tiles = place_tiles(&manifest, base)?
        .into_iter()
        .map(|t| {
            let img = image::open(&t.path)
                .map_err(image_err(&t.path))?
                .into_luma16();
            ProbabilityTile::from_quanta(t.rect, img.into_raw())
        })
        .collect::<Result<_>>()?;
    Ok(ProbabilityTiles { manifest, tiles })
}

/// Writes probability tiles as 16-bit PNGs plus `manifest.json` into `dir`.
pub fn write_probability_tiles(
    tiles: &[ProbabilityTile],
    dims: (usize, usize),
    resolution: Resolution,
    dir: &Path,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(tiles.len());
    for (i, tile) in tiles.iter().enumerate() {
        let r = tile.rect();
        let file = PathBuf::from(format!("prob_{i:04}.png"));
        let path = dir.join(&file);
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(r.w as u32, r.h as u32, tile.quanta().to_vec())
                .expect("tile buffer length");
        buf.save_with_format(&path, image::ImageFormat::Png)
            .map_err(image_err(&path))?;
        entries.push(ManifestTile {
            x: r.x,
            y: r.y,
            file,
        });
    }
    let manifest = Manifest {
        width_px: dims.0,
        height_px: dims.1,
        microns_per_pixel: resolution,
        tiles: entries,
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

/// One detection object per line; blank lines are skipped.
pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut dets = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(&line).map_err(json_err(path))?;
        d.validate()
            .map_err(|e| Error::input(format!("{}:{}: {e}", path.display(), n + 1)))?;
        dets.push(d);
    }
    Ok(dets)
}

pub fn write_detections(dets: &[Detection], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for d in dets {
        let line = serde_json::to_string(d).map_err(json_err(path))?;
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}
