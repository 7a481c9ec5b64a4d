//! Report serialization with a fixed float precision.

use mvi_core::mvindex::{FieldResult, MvReport};

pub const SIGNIFICANT_DIGITS: usize = 9;

/// Rounds to 9 significant digits, ties to even.
///
/// Rust's exponent formatting is correctly rounded, so parsing it back gives
/// the double nearest to the rounded decimal.
pub fn round_significant(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, v)
        .parse()
        .expect("formatted float parses")
}

pub fn rounded(report: &MvReport) -> MvReport {
    let r = round_significant;
    MvReport {
        k: r(report.k),
        area_mm2: r(report.area_mm2),
        vv_percent_mean: r(report.vv_percent_mean),
        vv_percent_std: r(report.vv_percent_std),
        mv_mean: r(report.mv_mean),
        mv_std: r(report.mv_std),
        mv_whole_roi: r(report.mv_whole_roi),
        det_threshold: r(report.det_threshold),
        fields: report
            .fields
            .iter()
            .map(|f| FieldResult {
                vv_percent: r(f.vv_percent),
                mv: f.mv.map(r),
                ..f.clone()
            })
            .collect(),
        ..report.clone()
    }
}

/// Pretty JSON with keys in declaration order and a trailing newline.
pub fn to_json(report: &MvReport) -> String {
    serde_json::to_string_pretty(&rounded(report)).expect("report serializes") + "\n"
}
