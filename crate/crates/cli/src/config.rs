//! Pipeline configuration file.

use std::path::{Path, PathBuf};

use mvi_core::imaging::Resolution;
use mvi_core::maskgen::MaskGenParams;
use mvi_core::mvindex::RoiSpec;
use mvi_core::stain::StainMatrix;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Tiling used by a model producing per-tile outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TilingConfig {
    pub tile_size: usize,
    pub overlap: usize,
    pub microns_per_pixel: Resolution,
}

impl TilingConfig {
    fn validate(&self, name: &str) -> Result<(), CliError> {
        if self.tile_size == 0 || self.overlap >= self.tile_size {
            return Err(CliError::config(format!(
                "{name}: need tile_size > overlap, got {} / {}",
                self.tile_size, self.overlap
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Stain basis JSON; the built-in H-DAB pair when absent.
    pub stains: Option<PathBuf>,
    pub maskgen: MaskGenParams,
    pub segmentation: TilingConfig,
    pub detection: TilingConfig,
    pub det_threshold: f64,
    pub nms_iou: f64,
    /// Threshold on the stitched segmentation probability.
    pub prob_threshold: f64,
    pub roi: RoiSpec,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            stains: None,
            maskgen: MaskGenParams::default(),
            segmentation: TilingConfig {
                tile_size: 1024,
                overlap: 128,
                microns_per_pixel: Resolution::SCAN_20X,
            },
            detection: TilingConfig {
                tile_size: 512,
                overlap: 64,
                microns_per_pixel: Resolution::SCAN_40X,
            },
            det_threshold: 0.5,
            nms_iou: 0.5,
            prob_threshold: 0.5,
            roi: RoiSpec::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new("config_not_found", format!("{}: {e}", path.display())))?;
        let config: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.maskgen
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        self.roi
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        self.segmentation.validate("segmentation")?;
        self.detection.validate("detection")?;
        if !(0.0..=1.0).contains(&self.det_threshold) {
            return Err(CliError::config(format!(
                "det_threshold must be in [0, 1], got {}",
                self.det_threshold
            )));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(CliError::config(format!(
                "nms_iou must be in (0, 1], got {}",
                self.nms_iou
            )));
        }
        if !(self.prob_threshold > 0.0 && self.prob_threshold <= 1.0) {
            return Err(CliError::config(format!(
                "prob_threshold must be in (0, 1], got {}",
                self.prob_threshold
            )));
        }
        Ok(())
    }

    pub fn stain_matrix(&self) -> Result<StainMatrix, CliError> {
        match &self.stains {
            Some(path) => Ok(StainMatrix::load(path)?),
            None => Ok(StainMatrix::h_dab()),
        }
    }
}
