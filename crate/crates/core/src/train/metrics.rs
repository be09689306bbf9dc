//! 3 px error, end-point error and occlusion IOU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disparity errors above this many pixels count as bad.
pub const BAD_PIXEL_PX: f64 = 3.0;
/// Tolerance for the maximum correctly predicted disparity.
pub const CORRECT_PX: f64 = 1.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percentage of valid pixels with error above 3 px.
    pub three_px_error: f64,
    pub epe: f64,
    pub occ_iou: f64,
    /// Non-occluded ground-truth pixels.
    pub valid_pixels: usize,
    pub bad_pixels: usize,
    pub abs_error_sum: f64,
    pub occ_intersection: usize,
    pub occ_union: usize,
    /// Largest ground-truth disparity predicted within 1 px.
    pub max_correct_disparity: Option<f64>,
    /// No valid pixel: disparity metrics are reported as 0.
    pub empty: bool,
}

impl MetricsReport {
    fn finish(mut self) -> Self {
        self.empty = self.valid_pixels == 0;
        if self.empty {
            self.three_px_error = 0.0;
            self.epe = 0.0;
        } else {
            self.three_px_error = 100.0 * self.bad_pixels as f64 / self.valid_pixels as f64;
            self.epe = self.abs_error_sum / self.valid_pixels as f64;
        }
        self.occ_iou = if self.occ_union == 0 {
            1.0
        } else {
            self.occ_intersection as f64 / self.occ_union as f64
        };
        self
    }

    /// Pools raw counts, so the result weights samples by pixel count.
    pub fn aggregate<'a>(reports: impl IntoIterator<Item = &'a MetricsReport>) -> Self {
        let mut out = MetricsReport::default();
        for r in reports {
            out.valid_pixels += r.valid_pixels;
            out.bad_pixels += r.bad_pixels;
            out.abs_error_sum += r.abs_error_sum;
            out.occ_intersection += r.occ_intersection;
            out.occ_union += r.occ_union;
            out.max_correct_disparity = match (out.max_correct_disparity, r.max_correct_disparity) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            };
        }
        out.finish()
    }
}

/// Disparity metrics over ground-truth non-occluded pixels; occlusion IOU of
/// predictions binarized at 0.5. Maps are flattened row-major.
pub fn eval_metrics(pred_disp: &[f64], pred_occ: &[f64], gt_disp: &[f64], gt_occ: &[bool]) -> Result<MetricsReport> {
    let n = gt_disp.len();
    if pred_disp.len() != n || pred_occ.len() != n || gt_occ.len() != n {
        return Err(Error::dim(
            "eval_metrics",
            format!(
                "pred {} / {}, gt {} / {}",
                pred_disp.len(),
                pred_occ.len(),
                n,
                gt_occ.len()
            ),
        ));
    }
    let mut r = MetricsReport::default();
    for k in 0..n {
        let po = pred_occ[k] > 0.5;
        if po && gt_occ[k] {
            r.occ_intersection += 1;
        }
        if po || gt_occ[k] {
            r.occ_union += 1;
        }
        if gt_occ[k] {
            continue;
        }
        let e = (pred_disp[k] - gt_disp[k]).abs();
        r.valid_pixels += 1;
        r.abs_error_sum += e;
        if e > BAD_PIXEL_PX {
            r.bad_pixels += 1;
        }
        if e <= CORRECT_PX {
            r.max_correct_disparity = Some(r.max_correct_disparity.map_or(gt_disp[k], |m: f64| m.max(gt_disp[k])));
        }
    }
    Ok(r.finish())
}
