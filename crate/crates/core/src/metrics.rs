//! Evaluation metrics: joint position error, PCK/AUC and mask IoU.

use serde::{Deserialize, Serialize};

use crate::error::{HamrError, Result};
use crate::raster::{mask_iou, Mask};

fn check_pairs<const D: usize>(pred: &[[f64; D]], gt: &[[f64; D]]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(HamrError::invalid(format!("{} predictions for {} ground-truth points", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(HamrError::invalid("no points to compare"));
    }
    Ok(())
}

fn distances<const D: usize>(pred: &[[f64; D]], gt: &[[f64; D]]) -> Vec<f64> {
    pred.iter()
        .zip(gt)
        .map(|(p, g)| p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect()
}

/// Mean Euclidean distance between corresponding points.
pub fn mpjpe<const D: usize>(pred: &[[f64; D]], gt: &[[f64; D]]) -> Result<f64> {
    check_pairs(pred, gt)?;
    let d = distances(pred, gt);
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Fraction of points within each threshold and the normalized area under
/// that curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckCurve {
    pub thresholds: Vec<f64>,
    pub pck: Vec<f64>,
    pub auc: f64,
}

/// PCK at each threshold (a point counts when its error is at most the
/// threshold) and trapezoidal AUC divided by the threshold span. With a single
/// threshold the AUC is that threshold's PCK.
pub fn pck_auc<const D: usize>(pred: &[[f64; D]], gt: &[[f64; D]], thresholds: &[f64]) -> Result<PckCurve> {
    check_pairs(pred, gt)?;
    let d = distances(pred, gt);
    pck_from_errors(&d, thresholds)
}

/// [`pck_auc`] over precomputed per-point errors, e.g. pooled across samples.
pub fn pck_from_errors(errors: &[f64], thresholds: &[f64]) -> Result<PckCurve> {
    if thresholds.is_empty() || errors.is_empty() {
        return Err(HamrError::invalid("PCK needs at least one error and one threshold"));
    }
    if thresholds.windows(2).any(|w| !(w[1] > w[0])) || thresholds.iter().any(|t| !t.is_finite()) {
        return Err(HamrError::invalid("thresholds must be finite and strictly increasing"));
    }
    let n = errors.len() as f64;
    let pck: Vec<f64> = thresholds
        .iter()
        .map(|t| errors.iter().filter(|e| **e <= *t).count() as f64 / n)
        .collect();
    let auc = if thresholds.len() == 1 {
        pck[0]
    } else {
        let area: f64 = thresholds.windows(2).zip(pck.windows(2)).map(|(t, p)| 0.5 * (p[0] + p[1]) * (t[1] - t[0])).sum();
        area / (thresholds[thresholds.len() - 1] - thresholds[0])
    };
    Ok(PckCurve { thresholds: thresholds.to_vec(), pck, auc })
}

/// `count` evenly spaced thresholds from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect(),
    }
}

/// Mean IoU over mask pairs.
pub fn mean_iou(pairs: &[(Mask, Mask)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(HamrError::invalid("no masks to compare"));
    }
    let mut sum = 0.0;
    for (a, b) in pairs {
        sum += mask_iou(a, b)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Per-sample numbers in an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub mpjpe_3d: Option<f64>,
    pub mpjpe_2d: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: Vec<SampleMetrics>,
    pub mean_mpjpe_3d: Option<f64>,
    pub mean_mpjpe_2d: Option<f64>,
    pub mean_iou: Option<f64>,
    pub pck_3d: Option<PckCurve>,
    pub pck_2d: Option<PckCurve>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("id,mpjpe_3d,mpjpe_2d,iou\n");
        for s in &self.samples {
            out.push_str(&format!("{},{},{},{}\n", s.id, cell(s.mpjpe_3d), cell(s.mpjpe_2d), cell(s.iou)));
        }
        out
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Aggregates per-sample metrics; `errors_3d`/`errors_2d` are pooled per-joint
/// errors used for the PCK curves.
pub fn build_report(
    samples: Vec<SampleMetrics>,
    errors_3d: &[f64],
    errors_2d: &[f64],
    thresholds_3d: &[f64],
    thresholds_2d: &[f64],
) -> Result<EvalReport> {
    let curve = |e: &[f64], t: &[f64]| if e.is_empty() { Ok(None) } else { pck_from_errors(e, t).map(Some) };
    Ok(EvalReport {
        mean_mpjpe_3d: mean_of(samples.iter().map(|s| s.mpjpe_3d)),
        mean_mpjpe_2d: mean_of(samples.iter().map(|s| s.mpjpe_2d)),
        mean_iou: mean_of(samples.iter().map(|s| s.iou)),
        pck_3d: curve(errors_3d, thresholds_3d)?,
        pck_2d: curve(errors_2d, thresholds_2d)?,
        samples,
    })
}
