//! Frame- and video-level average precision plus localization diagnostics.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::linker::ActionTube;

/// One scored frame-level detection committed to a class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub video: String,
    pub frame: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// One ground-truth box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub video: String,
    pub frame: usize,
    pub class: usize,
    pub bbox: BBox,
}

/// A tube tagged with its video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoTube {
    pub video: String,
    pub tube: ActionTube,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Matching criterion, `"frame"` or `"video"`.
    pub level: String,
    pub iou_threshold: f64,
    /// `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub recall: Option<f64>,
    pub accuracy: Option<f64>,
}

impl EvalReport {
    /// `key value` records, one per line.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "level {}", self.level);
        let _ = writeln!(s, "iou_threshold {}", self.iou_threshold);
        for (c, ap) in self.per_class_ap.iter().enumerate() {
            match ap {
                Some(v) => {
                    let _ = writeln!(s, "ap {c} {v}");
                }
                None => {
                    let _ = writeln!(s, "ap {c} none");
                }
            }
        }
        let _ = writeln!(s, "map {}", self.map);
        if let Some(r) = self.recall {
            let _ = writeln!(s, "recall {r}");
        }
        if let Some(a) = self.accuracy {
            let _ = writeln!(s, "accuracy {a}");
        }
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}-mAP @ IoU {}", self.level, self.iou_threshold)?;
        writeln!(f, "  class    AP")?;
        for (c, ap) in self.per_class_ap.iter().enumerate() {
            match ap {
                Some(v) => writeln!(f, "  {c:>5}  {:>6.2}", 100.0 * v)?,
                None => writeln!(f, "  {c:>5}       -")?,
            }
        }
        writeln!(f, "  mAP    {:>6.2}", 100.0 * self.map)?;
        if let Some(r) = self.recall {
            writeln!(f, "  recall {:>6.2}", 100.0 * r)?;
        }
        if let Some(a) = self.accuracy {
            writeln!(f, "  class accuracy {:>6.2}", 100.0 * a)?;
        }
        Ok(())
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Mean per-frame IoU over the union of both tubes' frames; a frame covered
/// by only one tube counts as 0.
pub fn tube_iou(a: &ActionTube, b: &ActionTube) -> f64 {
    let mut frames: Vec<usize> = a.entries.iter().chain(&b.entries).map(|e| e.frame).collect();
    frames.sort_unstable();
    frames.dedup();
    if frames.is_empty() {
        return 0.0;
    }
    let sa: HashMap<usize, BBox> = a.entries.iter().map(|e| (e.frame, e.bbox)).collect();
    let sb: HashMap<usize, BBox> = b.entries.iter().map(|e| (e.frame, e.bbox)).collect();
    let total: f64 = frames
        .iter()
        .map(|f| match (sa.get(f), sb.get(f)) {
            (Some(x), Some(y)) => x.iou(y),
            _ => 0.0,
        })
        .sum();
    total / frames.len() as f64
}

/// All-point interpolated area under the precision-recall curve of a ranked
/// list of hit/miss outcomes.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

/// Ranks candidates by descending score (stable) and greedily matches each
/// to the unmatched ground truth of highest overlap at or above `threshold`.
fn ranked_hits<C, G>(
    candidates: &[(f64, C)],
    gts: &[G],
    same_group: impl Fn(&C, &G) -> bool,
    overlap: impl Fn(&C, &G) -> f64,
    threshold: f64,
) -> Vec<bool> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].0.total_cmp(&candidates[a].0).then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let c = &candidates[i].1;
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || !same_group(c, g) {
                    continue;
                }
                let o = overlap(c, g);
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

fn mean_ap(per_class: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

fn num_classes_of(explicit: usize, a: impl Iterator<Item = usize>) -> usize {
    a.map(|c| c + 1).fold(explicit, usize::max)
}

/// Frame-level AP per class at one IoU threshold.
pub fn frame_map(dets: &[DetectionRecord], gts: &[GroundTruth], iou_threshold: f64, num_classes: usize) -> EvalReport {
    let n = num_classes_of(num_classes, dets.iter().map(|d| d.class).chain(gts.iter().map(|g| g.class)));
    let mut per_class = Vec::with_capacity(n);
    for c in 0..n {
        let cg: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == c).collect();
        if cg.is_empty() {
            per_class.push(None);
            continue;
        }
        let cd: Vec<(f64, &DetectionRecord)> = dets.iter().filter(|d| d.class == c).map(|d| (d.score, d)).collect();
        let hits = ranked_hits(
            &cd,
            &cg,
            |d, g| d.video == g.video && d.frame == g.frame,
            |d, g| d.bbox.iou(&g.bbox),
            iou_threshold,
        );
        per_class.push(Some(average_precision(&hits, cg.len())));
    }
    EvalReport {
        level: "frame".into(),
        iou_threshold,
        map: mean_ap(&per_class),
        per_class_ap: per_class,
        recall: None,
        accuracy: None,
    }
}

pub const VIDEO_THRESHOLDS: [f64; 4] = [0.1, 0.2, 0.5, 0.75];

/// Video-level AP per class at each threshold, matching by [`tube_iou`] and label.
pub fn video_map(tubes: &[VideoTube], gts: &[VideoTube], thresholds: &[f64], num_classes: usize) -> Vec<EvalReport> {
    let n = num_classes_of(num_classes, tubes.iter().map(|t| t.tube.class).chain(gts.iter().map(|g| g.tube.class)));
    thresholds
        .iter()
        .map(|&thr| {
            let mut per_class = Vec::with_capacity(n);
            for c in 0..n {
                let cg: Vec<&VideoTube> = gts.iter().filter(|g| g.tube.class == c).collect();
                if cg.is_empty() {
                    per_class.push(None);
                    continue;
                }
                let ct: Vec<(f64, &VideoTube)> =
                    tubes.iter().filter(|t| t.tube.class == c).map(|t| (t.tube.score(), t)).collect();
                let hits = ranked_hits(&ct, &cg, |t, g| t.video == g.video, |t, g| tube_iou(&t.tube, &g.tube), thr);
                per_class.push(Some(average_precision(&hits, cg.len())));
            }
            EvalReport {
                level: "video".into(),
                iou_threshold: thr,
                map: mean_ap(&per_class),
                per_class_ap: per_class,
                recall: None,
                accuracy: None,
            }
        })
        .collect()
}

/// `(recall, classification accuracy)`: a ground truth is localized when any
/// detection in its frame reaches `threshold` IoU regardless of class; it is
/// correctly classified when its best-overlap detection (ties to the higher
/// score) carries its class.
pub fn diagnostics(dets: &[DetectionRecord], gts: &[GroundTruth], threshold: f64) -> (f64, f64) {
    if gts.is_empty() {
        return (0.0, 0.0);
    }
    let mut by_frame: HashMap<(&str, usize), Vec<&DetectionRecord>> = HashMap::new();
    for d in dets {
        by_frame.entry((d.video.as_str(), d.frame)).or_default().push(d);
    }
    let mut localized = 0usize;
    let mut correct = 0usize;
    for g in gts {
        let Some(cands) = by_frame.get(&(g.video.as_str(), g.frame)) else {
            continue;
        };
        let mut best: Option<(&DetectionRecord, f64)> = None;
        for d in cands {
            let o = d.bbox.iou(&g.bbox);
            let better = match best {
                None => true,
                Some((b, bo)) => o > bo || (o == bo && d.score > b.score),
            };
            if better {
                best = Some((d, o));
            }
        }
        if let Some((d, o)) = best {
            if o >= threshold {
                localized += 1;
                if d.class == g.class {
                    correct += 1;
                }
            }
        }
    }
    let recall = localized as f64 / gts.len() as f64;
    let accuracy = if localized == 0 { 0.0 } else { correct as f64 / localized as f64 };
    (recall, accuracy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linker::TubeEntry;

    fn tube(class: usize, frames: std::ops::Range<usize>, b: BBox) -> ActionTube {
        ActionTube {
            class,
            entries: frames.map(|frame| TubeEntry { frame, bbox: b, score: 0.9 }).collect(),
        }
    }

    fn gt(frame: usize, class: usize, b: BBox) -> GroundTruth {
        GroundTruth {
            video: "v".into(),
            frame,
            class,
            bbox: b,
        }
    }

    fn det(frame: usize, class: usize, score: f64, b: BBox) -> DetectionRecord {
        DetectionRecord {
            video: "v".into(),
            frame,
            class,
            score,
            bbox: b,
        }
    }

    const B: BBox = BBox::new(0.1, 0.1, 0.3, 0.3);
    const FAR: BBox = BBox::new(0.6, 0.6, 0.3, 0.3);

    #[test]
    fn ap_of_tp_fp_tp() {
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn frame_map_examples() {
        let gts = vec![gt(0, 0, B), gt(1, 0, B)];
        let perfect = vec![det(0, 0, 0.9, B), det(1, 0, 0.8, B)];
        assert_eq!(frame_map(&perfect, &gts, 0.5, 1).map, 1.0);
        assert_eq!(frame_map(&[], &gts, 0.5, 1).map, 0.0);
        let mixed = vec![det(0, 0, 0.9, B), det(0, 0, 0.8, FAR), det(1, 0, 0.7, B)];
        assert!((frame_map(&mixed, &gts, 0.5, 1).map - 0.8333333333333334).abs() < 1e-12);
        let r = frame_map(&perfect, &gts, 0.5, 3);
        assert_eq!(r.per_class_ap, vec![Some(1.0), None, None]);
    }

    #[test]
    fn tube_iou_examples() {
        let a = tube(0, 0..10, B);
        assert_eq!(tube_iou(&a, &a), 1.0);
        assert_eq!(tube_iou(&a, &tube(0, 10..20, B)), 0.0);
        assert_eq!(tube_iou(&a, &tube(0, 0..5, B)), 0.5);
    }

    #[test]
    fn video_map_examples() {
        let g = VideoTube {
            video: "v".into(),
            tube: tube(1, 0..10, B),
        };
        let r = video_map(std::slice::from_ref(&g), std::slice::from_ref(&g), &VIDEO_THRESHOLDS, 2);
        assert!(r.iter().all(|e| e.map == 1.0));
        let partial = VideoTube {
            video: "v".into(),
            tube: tube(1, 0..3, B),
        };
        let r = video_map(&[partial], std::slice::from_ref(&g), &[0.2, 0.5], 2);
        assert_eq!((r[0].map, r[1].map), (1.0, 0.0));
        let wrong = VideoTube {
            video: "v".into(),
            tube: tube(0, 0..10, B),
        };
        assert!(video_map(&[wrong], &[g], &VIDEO_THRESHOLDS, 2).iter().all(|e| e.map == 0.0));
    }

    #[test]
    fn diagnostics_counting() {
        let gts = vec![gt(0, 0, B), gt(1, 1, B), gt(2, 0, B)];
        let dets = vec![det(0, 0, 0.9, B), det(1, 0, 0.9, B), det(2, 0, 0.9, FAR)];
        let (r, a) = diagnostics(&dets, &gts, 0.5);
        assert!((r - 2.0 / 3.0).abs() < 1e-12 && (a - 0.5).abs() < 1e-12);
        let (r, a) = diagnostics(&[det(0, 1, 0.9, B)], &gts[..1], 0.5);
        assert_eq!((r, a), (1.0, 0.0));
    }
}
