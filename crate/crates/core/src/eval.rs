//! Tracking benchmark metrics over a predicted and a groundtruth box trace.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Embedder};
use crate::geometry::{iou, BBox, Image};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{pred} predictions for {gt} groundtruth boxes")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("empty trace")]
    Empty,
}

pub const SUCCESS_STEPS: usize = 21;
pub const PRECISION_STEPS: usize = 51;
pub const PRECISION_THRESHOLD_PX: f64 = 20.0;
pub const NORM_PRECISION_THRESHOLD: f64 = 0.2;

/// Absorbs rounding in distances that land on a threshold by construction.
const BOUNDARY_SLACK: f64 = 1e-9;

fn check(pred: &[BBox], gt: &[BBox]) -> Result<(), EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    if gt.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

fn percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

fn center_distance(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// Success rate (percent of frames with IoU strictly above the threshold) at
/// IoU thresholds 0, 0.05, ..., 1, and its mean.
pub fn success_auc(pred: &[BBox], gt: &[BBox]) -> Result<(f64, Vec<f64>), EvalError> {
    check(pred, gt)?;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
    let curve: Vec<f64> = (0..SUCCESS_STEPS)
        .map(|k| {
            let thr = k as f64 / (SUCCESS_STEPS - 1) as f64;
            percent(ious.iter().filter(|&&v| v > thr).count(), ious.len())
        })
        .collect();
    let auc = curve.iter().sum::<f64>() / curve.len() as f64;
    Ok((auc, curve))
}

/// Percent of frames whose centre error is at most `pixel_threshold`, plus the
/// curve over 0..=50 px.
pub fn precision(pred: &[BBox], gt: &[BBox], pixel_threshold: f64) -> Result<(f64, Vec<f64>), EvalError> {
    check(pred, gt)?;
    let dists: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| center_distance(p, g)).collect();
    let at = |thr: f64| percent(dists.iter().filter(|&&d| d <= thr + BOUNDARY_SLACK).count(), dists.len());
    let curve = (0..PRECISION_STEPS).map(|px| at(px as f64)).collect();
    Ok((at(pixel_threshold), curve))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormPrecision {
    pub value: f64,
    /// Frames left out because their groundtruth box has zero width or height.
    pub skipped: usize,
}

/// Percent of frames whose centre error, divided by the groundtruth width and
/// height per axis, has norm at most `threshold`.
pub fn norm_precision(pred: &[BBox], gt: &[BBox], threshold: f64) -> Result<NormPrecision, EvalError> {
    check(pred, gt)?;
    let mut hits = 0;
    let mut used = 0;
    for (p, g) in pred.iter().zip(gt) {
        if g.w <= 0.0 || g.h <= 0.0 {
            continue;
        }
        used += 1;
        let (px, py) = p.center();
        let (gx, gy) = g.center();
        if ((px - gx) / g.w).hypot((py - gy) / g.h) <= threshold + BOUNDARY_SLACK {
            hits += 1;
        }
    }
    let skipped = gt.len() - used;
    if skipped > 0 {
        log::warn!("{skipped} frame(s) with zero-area groundtruth left out of normalized precision");
    }
    Ok(NormPrecision { value: percent(hits, used), skipped })
}

/// Scaled cosine between a text and an image patch embedding.
pub fn text_image_alignment(text: &str, patch: &Image, embedder: &mut dyn Embedder) -> Result<f64, BackendError> {
    let t = embedder.embed_text(text)?;
    let i = embedder.embed_image(patch)?;
    Ok(100.0 * t.cosine(&i))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    #[serde(rename = "p")]
    pub precision: f64,
    #[serde(rename = "p_norm")]
    pub norm_precision: f64,
    pub success_curve: Vec<f64>,
    pub precision_curve: Vec<f64>,
    pub frames: usize,
    pub skipped_norm_frames: usize,
}

impl MetricReport {
    pub fn compute(pred: &[BBox], gt: &[BBox]) -> Result<Self, EvalError> {
        let (auc, success_curve) = success_auc(pred, gt)?;
        let (precision, precision_curve) = precision(pred, gt, PRECISION_THRESHOLD_PX)?;
        let np = norm_precision(pred, gt, NORM_PRECISION_THRESHOLD)?;
        Ok(MetricReport {
            auc,
            precision,
            norm_precision: np.value,
            success_curve,
            precision_curve,
            frames: gt.len(),
            skipped_norm_frames: np.skipped,
        })
    }

    /// Frame-weighted mean of several reports.
    pub fn pooled(reports: &[MetricReport]) -> Option<MetricReport> {
        let total: usize = reports.iter().map(|r| r.frames).sum();
        if total == 0 {
            return None;
        }
        let w = |f: &dyn Fn(&MetricReport) -> f64| {
            reports.iter().map(|r| f(r) * r.frames as f64).sum::<f64>() / total as f64
        };
        let curve =
            |f: &dyn Fn(&MetricReport) -> &Vec<f64>, n: usize| (0..n).map(|i| w(&|r| f(r)[i])).collect::<Vec<f64>>();
        Some(MetricReport {
            auc: w(&|r| r.auc),
            precision: w(&|r| r.precision),
            norm_precision: w(&|r| r.norm_precision),
            success_curve: curve(&|r| &r.success_curve, SUCCESS_STEPS),
            precision_curve: curve(&|r| &r.precision_curve, PRECISION_STEPS),
            frames: total,
            skipped_norm_frames: reports.iter().map(|r| r.skipped_norm_frames).sum(),
        })
    }
}

/// Plain-text table, one row per named report.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("sequence".len());
    let mut out = format!("{:<width$}  {:>7}  {:>7}  {:>7}  {:>6}\n", "sequence", "AUC", "P_norm", "P", "frames");
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<width$}  {:>7.2}  {:>7.2}  {:>7.2}  {:>6}\n",
            name, r.auc, r.norm_precision, r.precision, r.frames
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::FeatureVector;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn trace() -> Vec<BBox> {
        (0..10).map(|i| bb(i as f64 * 3.0, 5.0, 30.0 + i as f64, 20.0)).collect()
    }

    #[test]
    fn perfect_trace() {
        let gt = trace();
        let r = MetricReport::compute(&gt, &gt).unwrap();
        assert!((r.auc - 2000.0 / 21.0).abs() < 1e-9);
        assert_eq!(r.precision, 100.0);
        assert_eq!(r.norm_precision, 100.0);
        assert_eq!(r.success_curve.len(), 21);
        assert_eq!(r.precision_curve.len(), 51);
        assert_eq!(r.success_curve[20], 0.0);
    }

    #[test]
    fn disjoint_trace_has_zero_auc() {
        let gt = trace();
        let pred: Vec<BBox> = gt.iter().map(|b| b.translate(1000.0, 0.0)).collect();
        assert_eq!(success_auc(&pred, &gt).unwrap().0, 0.0);
    }

    #[test]
    fn two_frame_enumeration() {
        let gt = vec![bb(0.0, 0.0, 10.0, 10.0); 2];
        let pred = vec![bb(5.0, 0.0, 10.0, 10.0), bb(0.0, 0.0, 10.0, 10.0)];
        // IoUs 1/3 and 1: thresholds 0..0.30 (7 of them) see both, 0.35..0.95 (13) see one
        let expected = (7.0 * 100.0 + 13.0 * 50.0) / 21.0;
        assert!((success_auc(&pred, &gt).unwrap().0 - expected).abs() < 1e-9);
    }

    #[test]
    fn precision_boundaries() {
        let gt = vec![bb(0.0, 0.0, 10.0, 10.0)];
        assert_eq!(precision(&[bb(12.0, 16.0, 10.0, 10.0)], &gt, 20.0).unwrap().0, 100.0);
        assert_eq!(precision(&[bb(21.0, 0.0, 10.0, 10.0)], &gt, 20.0).unwrap().0, 0.0);
        let (_, curve) = precision(&[bb(12.0, 16.0, 10.0, 10.0)], &gt, 20.0).unwrap();
        assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(curve[19], 0.0);
        assert_eq!(curve[20], 100.0);
    }

    #[test]
    fn norm_precision_boundaries() {
        let g = bb(10.0, 10.0, 30.0, 50.0);
        let at = |dx: f64| norm_precision(&[g.translate(dx, 0.0)], &[g], 0.2).unwrap().value;
        assert_eq!(at(0.0), 100.0);
        assert_eq!(at(0.2 * 30.0), 100.0);
        assert_eq!(at(0.3 * 30.0), 0.0);
    }

    #[test]
    fn norm_precision_skips_degenerate_gt() {
        let gt = vec![bb(0.0, 0.0, 10.0, 10.0), bb(0.0, 0.0, 0.0, 10.0)];
        let r = norm_precision(&gt, &gt, 0.2).unwrap();
        assert_eq!(r, NormPrecision { value: 100.0, skipped: 1 });
    }

    #[test]
    fn invariances() {
        let gt = trace();
        let pred: Vec<BBox> = gt.iter().enumerate().map(|(i, b)| b.translate(i as f64 * 1.7, -(i as f64))).collect();
        let base = MetricReport::compute(&pred, &gt).unwrap();
        let shift = |v: &[BBox]| v.iter().map(|b| b.translate(13.0, -4.0)).collect::<Vec<_>>();
        let shifted = MetricReport::compute(&shift(&pred), &shift(&gt)).unwrap();
        assert!((base.auc - shifted.auc).abs() < 1e-9);
        assert!((base.precision - shifted.precision).abs() < 1e-9);
        assert!((base.norm_precision - shifted.norm_precision).abs() < 1e-9);

        let double = |v: &[BBox]| v.iter().map(|b| bb(b.x * 2.0, b.y * 2.0, b.w * 2.0, b.h * 2.0)).collect::<Vec<_>>();
        let doubled = MetricReport::compute(&double(&pred), &double(&gt)).unwrap();
        assert!((base.auc - doubled.auc).abs() < 1e-9);
        assert!((base.norm_precision - doubled.norm_precision).abs() < 1e-9);
        assert_ne!(base.precision_curve, doubled.precision_curve);
    }

    #[test]
    fn length_mismatch() {
        assert_eq!(success_auc(&trace(), &trace()[..3]).unwrap_err(), EvalError::LengthMismatch { pred: 10, gt: 3 });
        assert_eq!(precision(&[], &[], 20.0).unwrap_err(), EvalError::Empty);
    }

    struct Fixed(Vec<f64>, Vec<f64>);

    impl Embedder for Fixed {
        fn embed_image(&mut self, _: &Image) -> Result<FeatureVector, BackendError> {
            Ok(FeatureVector(self.1.clone()))
        }
        fn embed_text(&mut self, _: &str) -> Result<FeatureVector, BackendError> {
            Ok(FeatureVector(self.0.clone()))
        }
    }

    #[test]
    fn alignment_score() {
        let img = Image::filled(2, 2, [0, 0, 0]);
        let same = text_image_alignment("car", &img, &mut Fixed(vec![1.0, 2.0], vec![1.0, 2.0])).unwrap();
        assert!((same - 100.0).abs() < 1e-9);
        assert_eq!(text_image_alignment("car", &img, &mut Fixed(vec![1.0, 0.0], vec![0.0, 3.0])).unwrap(), 0.0);
    }

    #[test]
    fn json_keys_and_table() {
        let gt = trace();
        let r = MetricReport::compute(&gt, &gt).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for key in ["auc", "p", "p_norm", "success_curve", "precision_curve"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let table = format_table(&[("seq".into(), r)]);
        assert!(table.contains("95.24"));
        let pooled = MetricReport::pooled(&[MetricReport::compute(&gt, &gt).unwrap()]).unwrap();
        assert!((pooled.auc - 2000.0 / 21.0).abs() < 1e-9);
    }
}
