//! Mask metrics: per-object IoU and pixel accuracy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::images::MaskImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub object_id: u16,
    pub iou: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub timestamp: Option<f64>,
    pub objects: Vec<ObjectMetrics>,
    pub mean_iou: f64,
    pub mean_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Averaged over the frames in which each object appears.
    pub per_object: Vec<ObjectMetrics>,
    /// Mean over all evaluated (frame, object) pairs.
    pub mean_iou: f64,
    pub mean_acc: f64,
    pub frames: Vec<FrameMetrics>,
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// IoU and accuracy of binary masks. Accuracy is the fraction of all image
/// pixels on which prediction and ground truth agree.
pub fn binary_scores(pred: &[bool], gt: &[bool]) -> (f64, f64) {
    let (mut inter, mut union, mut agree) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        inter += (*p && *g) as usize;
        union += (*p || *g) as usize;
        agree += (p == g) as usize;
    }
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    (iou, agree as f64 / pred.len().max(1) as f64)
}

/// Scores one frame. Every non-void ID present in the ground truth is an
/// object; IDs absent from the ground truth are skipped.
pub fn evaluate_frame(pred: &MaskImage, gt: &MaskImage) -> Result<Vec<ObjectMetrics>> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Usage(format!(
            "prediction is {}×{} but ground truth is {}×{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    Ok(gt
        .ids()
        .into_iter()
        .map(|id| {
            let (iou, acc) = binary_scores(&pred.region(id), &gt.region(id));
            ObjectMetrics { object_id: id, iou, acc }
        })
        .collect())
}

/// Scores soft per-object masks: `pred[k]` holds the rendered mask of
/// `object_ids[k]`, binarized at `threshold`.
pub fn evaluate_soft_frame(
    pred: &[Vec<f64>],
    object_ids: &[u16],
    gt: &MaskImage,
    threshold: f64,
) -> Result<Vec<ObjectMetrics>> {
    if pred.len() != object_ids.len() {
        return Err(Error::Usage("one soft mask per object ID expected".into()));
    }
    let mut out = Vec::new();
    for (m, id) in pred.iter().zip(object_ids) {
        if m.len() != gt.pixel_count() {
            return Err(Error::Usage(format!("soft mask holds {} pixels, expected {}", m.len(), gt.pixel_count())));
        }
        let g = gt.region(*id);
        if !g.iter().any(|v| *v) {
            log::warn!("object {id} has an empty ground-truth mask; skipped");
            continue;
        }
        let p: Vec<bool> = m.iter().map(|v| *v > threshold).collect();
        let (iou, acc) = binary_scores(&p, &g);
        out.push(ObjectMetrics { object_id: *id, iou, acc });
    }
    Ok(out)
}

/// Aggregates per-frame object metrics into a report.
pub fn summarize(frames: Vec<FrameMetrics>) -> MetricsReport {
    let mut ids: Vec<u16> = frames.iter().flat_map(|f| f.objects.iter().map(|o| o.object_id)).collect();
    ids.sort_unstable();
    ids.dedup();
    let all: Vec<&ObjectMetrics> = frames.iter().flat_map(|f| &f.objects).collect();
    let mean = |v: &[&ObjectMetrics], f: fn(&ObjectMetrics) -> f64| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().map(|o| f(o)).sum::<f64>() / v.len() as f64
        }
    };
    let per_object = ids
        .iter()
        .map(|id| {
            let v: Vec<&ObjectMetrics> = all.iter().copied().filter(|o| o.object_id == *id).collect();
            ObjectMetrics {
                object_id: *id,
                iou: mean(&v, |o| o.iou),
                acc: mean(&v, |o| o.acc),
            }
        })
        .collect();
    MetricsReport {
        per_object,
        mean_iou: mean(&all, |o| o.iou),
        mean_acc: mean(&all, |o| o.acc),
        frames,
    }
}

/// Scores predicted ID masks against ground truth, frame by frame.
pub fn evaluate(pred: &[MaskImage], gt: &[MaskImage], timestamps: Option<&[f64]>) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::Usage(format!("{} predictions for {} ground-truth masks", pred.len(), gt.len())));
    }
    let mut frames = Vec::with_capacity(pred.len());
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        let objects = evaluate_frame(p, g)?;
        frames.push(frame_metrics(i, timestamps.map(|t| t[i]), objects));
    }
    Ok(summarize(frames))
}

pub fn frame_metrics(frame: usize, timestamp: Option<f64>, objects: Vec<ObjectMetrics>) -> FrameMetrics {
    let n = objects.len().max(1) as f64;
    FrameMetrics {
        frame,
        timestamp,
        mean_iou: objects.iter().map(|o| o.iou).sum::<f64>() / n,
        mean_acc: objects.iter().map(|o| o.acc).sum::<f64>() / n,
        objects,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, labels: Vec<u16>) -> MaskImage {
        MaskImage {
            width: w,
            height: labels.len() / w,
            labels,
        }
    }

    #[test]
    fn perfect_prediction() {
        let gt = mask(4, vec![0, 1, 1, 2, 2, 2, 0, 0]);
        let r = evaluate(std::slice::from_ref(&gt), std::slice::from_ref(&gt), None).unwrap();
        assert_eq!(r.mean_iou, 1.0);
        assert_eq!(r.mean_acc, 1.0);
    }

    #[test]
    fn disjoint_and_half_cover() {
        let gt = mask(4, vec![1, 1, 0, 0]);
        let disjoint = mask(4, vec![0, 0, 1, 1]);
        assert_eq!(evaluate_frame(&disjoint, &gt).unwrap()[0].iou, 0.0);
        let gt = mask(4, vec![1, 1, 1, 1]);
        let half = mask(4, vec![1, 1, 0, 0]);
        let m = evaluate_frame(&half, &gt).unwrap();
        assert_eq!(m[0].iou, 0.5);
        assert_eq!(m[0].acc, 0.5);
    }

    #[test]
    fn relabeling_is_symmetric() {
        let gt = mask(3, vec![1, 2, 2, 0, 1, 2]);
        let pred = mask(3, vec![1, 1, 2, 0, 2, 2]);
        let swap = |m: &MaskImage| mask(3, m.labels.iter().map(|l| [0, 2, 1][*l as usize]).collect());
        let a = evaluate(std::slice::from_ref(&pred), std::slice::from_ref(&gt), None).unwrap();
        let b = evaluate(&[swap(&pred)], &[swap(&gt)], None).unwrap();
        assert!((a.mean_iou - b.mean_iou).abs() < 1e-12);
        assert!((a.mean_acc - b.mean_acc).abs() < 1e-12);
    }

    #[test]
    fn soft_masks_threshold_and_skip_empty() {
        let gt = mask(4, vec![1, 1, 0, 0]);
        let m = evaluate_soft_frame(&[vec![0.5, 0.11, 0.1, 0.0], vec![0.9; 4]], &[1, 2], &gt, 0.1).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].iou, 1.0);
    }

    #[test]
    fn size_mismatch_is_usage_error() {
        assert!(evaluate_frame(&mask(2, vec![0, 0]), &mask(1, vec![0, 0])).is_err());
        assert!(evaluate(&[], &[mask(1, vec![0])], None).is_err());
    }
}
