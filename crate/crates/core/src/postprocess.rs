//! Confidence filtering and per-class greedy non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmsConfig {
    pub conf_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.25,
            iou_threshold: 0.4,
        }
    }
}

impl NmsConfig {
    /// Suppression threshold used with grouped (pose + interaction) classes.
    pub fn multi_label() -> Self {
        Self {
            iou_threshold: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("conf_threshold", self.conf_threshold), ("iou_threshold", self.iou_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("nms.{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Keeps detections with confidence strictly above `tau`, in order.
pub fn filter_confidence(dets: Vec<Detection>, tau: f64) -> Vec<Detection> {
    dets.into_iter().filter(|d| d.confidence > tau).collect()
}

/// Greedy suppression over `(box, score)` pairs; returns kept indices by
/// descending score, ties to the earlier index.
pub fn nms_indices(boxes: &[crate::bbox::BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && boxes[i].iou(&boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Detections kept for class `c`, scored by `confidence × p_c`.
pub fn nms(dets: &[Detection], class: usize, iou_threshold: f64) -> Vec<Detection> {
    let boxes: Vec<_> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score(class)).collect();
    nms_indices(&boxes, &scores, iou_threshold).into_iter().map(|i| dets[i].clone()).collect()
}

/// A detection committed to one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDetection {
    pub class: usize,
    pub score: f64,
    pub detection: Detection,
}

/// Confidence filter followed by per-class suppression over every class.
///
/// Output is ordered by class, then descending score.
pub fn postprocess(dets: Vec<Detection>, num_classes: usize, cfg: &NmsConfig) -> Vec<ClassDetection> {
    let kept = filter_confidence(dets, cfg.conf_threshold);
    let mut out = Vec::new();
    for c in 0..num_classes {
        for d in nms(&kept, c, cfg.iou_threshold) {
            out.push(ClassDetection {
                class: c,
                score: d.score(c),
                detection: d,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::BBox;

    fn det(x: f64, conf: f64) -> Detection {
        Detection {
            frame: 0,
            bbox: BBox::new(x, 0.0, 0.5, 0.5),
            confidence: conf,
            class_scores: vec![1.0],
        }
    }

    #[test]
    fn strict_confidence_filter() {
        let kept = filter_confidence(vec![det(0.0, 0.9), det(0.0, 0.25), det(0.0, 0.1)], 0.25);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);
        assert!(filter_confidence(Vec::new(), 0.25).is_empty());
    }

    #[test]
    fn overlapping_pair_keeps_the_stronger() {
        // IoU of [0, 0.5] and [0.0278, 0.5278] wide boxes of equal height is 0.8
        let shift = 0.5 * (1.0 - 0.8) / (1.0 + 0.8);
        let kept = nms(&[det(0.0, 0.9), det(shift, 0.7)], 0, 0.4);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);
        assert_eq!(nms(&[det(0.0, 0.9), det(0.5, 0.7)], 0, 0.4).len(), 2);
    }

    #[test]
    fn ties_go_to_the_earlier_index() {
        let boxes = [BBox::new(0.0, 0.0, 0.5, 0.5), BBox::new(0.01, 0.0, 0.5, 0.5)];
        assert_eq!(nms_indices(&boxes, &[0.5, 0.5], 0.4), vec![0]);
    }
}
