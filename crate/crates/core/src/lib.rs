//! Volume-corrected mitotic index (M/V-Index) on histology regions of interest.
//!
//! The crate covers the classical part of the pipeline: epithelium reference
//! masks generated from cytokeratin IHC, stitching of tiled model outputs,
//! epithelium filtering of mitotic-figure detections, the index itself with
//! a point-grid estimator of the epithelial fraction, and segmentation and
//! agreement metrics.

pub mod error;
pub mod fusion;
pub mod imaging;
pub mod io;
pub mod maskgen;
pub mod metrics;
pub mod morphology;
pub mod mvindex;
pub mod stain;
pub mod synth;

pub use error::{Error, Result};
