//! Segmentation overlap, agreement statistics and the TP/FP/FN overlay.

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, RasterImage};

/// Paired prediction/reference values of equal, non-zero length.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSeries {
    predictions: Vec<f64>,
    references: Vec<f64>,
}

impl PairedSeries {
    pub fn new(predictions: Vec<f64>, references: Vec<f64>) -> Result<Self> {
        if predictions.len() != references.len() {
            return Err(Error::input(format!(
                "series lengths differ: {} vs {}",
                predictions.len(),
                references.len()
            )));
        }
        if predictions.is_empty() {
            return Err(Error::input("empty series"));
        }
        if predictions
            .iter()
            .chain(&references)
            .any(|v| !v.is_finite())
        {
            return Err(Error::input("series contain non-finite values"));
        }
        Ok(PairedSeries {
            predictions,
            references,
        })
    }

    pub fn predictions(&self) -> &[f64] {
        &self.predictions
    }

    pub fn references(&self) -> &[f64] {
        &self.references
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}

/// Pixel counts of a prediction/reference pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn confusion(pred: &BinaryMask, reference: &BinaryMask) -> Result<Confusion> {
    if pred.dims() != reference.dims() {
        return Err(Error::DimensionMismatch {
            left: pred.dims(),
            right: reference.dims(),
        });
    }
    let mut c = Confusion::default();
    for (&p, &r) in pred.bits().iter().zip(reference.bits()) {
        match (p, r) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `|P ∧ R| / |P ∨ R|`; 1 when both masks are empty.
pub fn iou(pred: &BinaryMask, reference: &BinaryMask) -> Result<f64> {
    let c = confusion(pred, reference)?;
    let union = c.tp + c.fp + c.fn_;
    Ok(if union == 0 {
        1.0
    } else {
        c.tp as f64 / union as f64
    })
}

/// `2|P ∧ R| / (|P| + |R|)`; 1 when both masks are empty.
pub fn dice_f1(pred: &BinaryMask, reference: &BinaryMask) -> Result<f64> {
    let c = confusion(pred, reference)?;
    let total = 2 * c.tp + c.fp + c.fn_;
    Ok(if total == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / total as f64
    })
}

pub fn mae(s: &PairedSeries) -> f64 {
    let total: f64 = s
        .predictions
        .iter()
        .zip(&s.references)
        .map(|(p, r)| (p - r).abs())
        .sum();
    total / s.len() as f64
}

/// Sample Pearson correlation. Undefined for fewer than two pairs or a
/// constant series.
pub fn pearson_r(s: &PairedSeries) -> Result<f64> {
    if s.len() < 2 {
        return Err(Error::UndefinedCorrelation(
            "need at least two pairs".into(),
        ));
    }
    let n = s.len() as f64;
    let mx = s.predictions.iter().sum::<f64>() / n;
    let my = s.references.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in s.predictions.iter().zip(&s.references) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub const TP_COLOR: [u8; 3] = [0, 255, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 0, 255];

/// Half-and-half blend, rounded half up.
#[inline]
pub fn blend_half(src: [u8; 3], tint: [u8; 3]) -> [u8; 3] {
    std::array::from_fn(|c| (src[c] as u16 + tint[c] as u16).div_ceil(2) as u8)
}

/// Tints true positives green, false positives red and false negatives blue
/// at 50 % opacity; true negatives keep the source colour.
pub fn render_overlay(
    image: &RasterImage,
    pred: &BinaryMask,
    reference: &BinaryMask,
) -> Result<RasterImage> {
    if pred.dims() != reference.dims() {
        return Err(Error::DimensionMismatch {
            left: pred.dims(),
            right: reference.dims(),
        });
    }
    if image.dims() != pred.dims() {
        return Err(Error::DimensionMismatch {
            left: image.dims(),
            right: pred.dims(),
        });
    }
    let src = image
        .bytes()
        .filter(|_| image.channels() == 3)
        .ok_or_else(|| Error::input("overlay needs an 8-bit RGB image"))?;
    let mut out = src.to_vec();
    for (i, px) in out.chunks_exact_mut(3).enumerate() {
        let tint = match (pred.bits()[i], reference.bits()[i]) {
            (true, true) => TP_COLOR,
            (true, false) => FP_COLOR,
            (false, true) => FN_COLOR,
            (false, false) => continue,
        };
        px.copy_from_slice(&blend_half([px[0], px[1], px[2]], tint));
    }
    RasterImage::rgb8(image.width(), image.height(), image.resolution(), out)
}
