use serde::{Deserialize, Serialize};

use super::AnchorSet;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-slot channel offsets inside one anchor's `5 + NumCls` block.
pub const TX: usize = 0;
pub const TY: usize = 1;
pub const TW: usize = 2;
pub const TH: usize = 3;
pub const TCONF: usize = 4;
pub const CLASS0: usize = 5;

/// How class logits become class scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ClassMode {
    /// Softmax over all classes.
    Single,
    /// Softmax over the first `pose` classes, independent sigmoids over the rest.
    Multi { pose: usize },
}

/// Raw head output for one sample, laid out `[anchor][5 + NumCls][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGrid {
    pub values: Vec<f64>,
    pub num_anchors: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
}

impl RawGrid {
    pub fn new(values: Vec<f64>, num_anchors: usize, num_classes: usize, height: usize, width: usize) -> Result<Self> {
        let want = num_anchors * (5 + num_classes) * height * width;
        if values.len() != want {
            return Err(Error::shape("raw_grid", format!("{} values, expected {want}", values.len())));
        }
        Ok(Self {
            values,
            num_anchors,
            num_classes,
            height,
            width,
        })
    }

    /// Sample `n` of a batched `[N×k(5+NumCls)×H'×W']` head output.
    pub fn from_batch<T: Real>(raw: &Tensor<T>, n: usize, num_anchors: usize, num_classes: usize) -> Result<Self> {
        let s = raw.shape();
        if s.len() != 4 || s[1] != num_anchors * (5 + num_classes) || n >= s[0] {
            return Err(Error::shape(
                "raw_grid",
                format!("sample {n} of {s:?} with {num_anchors} anchors and {num_classes} classes"),
            ));
        }
        let per = s[1] * s[2] * s[3];
        let values = raw.values()[n * per..(n + 1) * per].iter().map(|v| v.f64()).collect();
        Self::new(values, num_anchors, num_classes, s[2], s[3])
    }

    pub fn channels_per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    pub fn num_slots(&self) -> usize {
        self.num_anchors * self.height * self.width
    }

    pub fn get(&self, anchor: usize, channel: usize, y: usize, x: usize) -> f64 {
        let c = anchor * self.channels_per_anchor() + channel;
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, anchor: usize, channel: usize, y: usize, x: usize, v: f64) {
        let c = anchor * self.channels_per_anchor() + channel;
        self.values[(c * self.height + y) * self.width + x] = v;
    }

    /// Predicted box of one slot, before clipping.
    pub fn slot_box(&self, anchors: &AnchorSet, anchor: usize, y: usize, x: usize) -> BBox {
        let (gw, gh) = (self.width as f64, self.height as f64);
        let (aw, ah) = anchors.get(anchor);
        let cx = (sigmoid(self.get(anchor, TX, y, x)) + x as f64) / gw;
        let cy = (sigmoid(self.get(anchor, TY, y, x)) + y as f64) / gh;
        let w = aw * self.get(anchor, TW, y, x).exp() / gw;
        let h = ah * self.get(anchor, TH, y, x).exp() / gh;
        BBox::from_center(cx, cy, w, h)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn class_scores(logits: &[f64], mode: ClassMode) -> Vec<f64> {
    match mode {
        ClassMode::Single => softmax(logits),
        ClassMode::Multi { pose } => {
            let p = pose.min(logits.len());
            let mut out = if p > 0 { softmax(&logits[..p]) } else { Vec::new() };
            out.extend(logits[p..].iter().map(|&v| sigmoid(v)));
            out
        }
    }
}

/// One frame-level box with objectness and per-class scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: usize,
    pub bbox: BBox,
    pub confidence: f64,
    pub class_scores: Vec<f64>,
}

impl Detection {
    /// Ranking score for class `c`: confidence × class probability.
    pub fn score(&self, c: usize) -> f64 {
        self.confidence * self.class_scores.get(c).copied().unwrap_or(0.0)
    }

    /// Highest-scoring class; ties go to the lowest id.
    pub fn best_class(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.class_scores.iter().enumerate() {
            if s > self.class_scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Every slot of the grid as a detection, in slot order `(anchor, y, x)`.
pub fn decode(raw: &RawGrid, anchors: &AnchorSet, mode: ClassMode, frame: usize) -> Result<Vec<Detection>> {
    if anchors.len() != raw.num_anchors {
        return Err(Error::shape(
            "decode",
            format!("{} anchors for a grid with {} anchor slots", anchors.len(), raw.num_anchors),
        ));
    }
    let mut out = Vec::with_capacity(raw.num_slots());
    let mut logits = vec![0.0; raw.num_classes];
    for a in 0..raw.num_anchors {
        for y in 0..raw.height {
            for x in 0..raw.width {
                for (c, l) in logits.iter_mut().enumerate() {
                    *l = raw.get(a, CLASS0 + c, y, x);
                }
                out.push(Detection {
                    frame,
                    bbox: raw.slot_box(anchors, a, y, x).clip_unit(),
                    confidence: sigmoid(raw.get(a, TCONF, y, x)),
                    class_scores: class_scores(&logits, mode),
                });
            }
        }
    }
    Ok(out)
}

/// A ground-truth box with its action class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub class: usize,
}

/// Regression targets of one responsible slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Index of the ground-truth box in the frame's list.
    pub gt: usize,
    pub class: usize,
    pub anchor: usize,
    pub cell: (usize, usize),
    /// Slot index `(anchor·H' + y)·W' + x` within the sample.
    pub slot: usize,
    /// Center offsets inside the cell, the targets of `σ(tx)`, `σ(ty)`.
    pub offset: (f64, f64),
    /// Targets of `tw`, `th`.
    pub log_scale: (f64, f64),
    pub bbox: BBox,
}

impl Assignment {
    /// Raw `(tx, ty, tw, th)` that decode back to the ground-truth box.
    pub fn raw_targets(&self) -> [f64; 4] {
        let logit = |p: f64| {
            let p = p.clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        };
        [logit(self.offset.0), logit(self.offset.1), self.log_scale.0, self.log_scale.1]
    }
}

/// Slot assignments for one frame; every unlisted slot is no-object.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTargets {
    pub assignments: Vec<Assignment>,
    pub num_slots: usize,
}

impl FrameTargets {
    pub fn responsibility_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.num_slots];
        for a in &self.assignments {
            m[a.slot] = true;
        }
        m
    }
}

/// Each box goes to the cell holding its center and the anchor of highest
/// co-centered IoU. A second box landing on an occupied slot is skipped.
pub fn build_targets(gts: &[LabeledBox], anchors: &AnchorSet, grid: (usize, usize)) -> Result<FrameTargets> {
    let (gh, gw) = grid;
    let mut assignments: Vec<Assignment> = Vec::new();
    for (i, g) in gts.iter().enumerate() {
        let b = g.bbox;
        if !(b.w > 0.0 && b.h > 0.0) || !b.is_finite() {
            return Err(Error::invalid(format!("ground-truth box {b:?} has non-positive size")));
        }
        let (cx, cy) = b.center();
        let fx = (cx * gw as f64).clamp(0.0, gw as f64 - 1e-9);
        let fy = (cy * gh as f64).clamp(0.0, gh as f64 - 1e-9);
        let (x, y) = (fx.floor() as usize, fy.floor() as usize);
        let wh = (b.w * gw as f64, b.h * gh as f64);
        let anchor = anchors.best_match(wh);
        let slot = (anchor * gh + y) * gw + x;
        if assignments.iter().any(|a| a.slot == slot) {
            continue;
        }
        let (aw, ah) = anchors.get(anchor);
        assignments.push(Assignment {
            gt: i,
            class: g.class,
            anchor,
            cell: (x, y),
            slot,
            offset: (fx - x as f64, fy - y as f64),
            log_scale: ((wh.0 / aw).ln(), (wh.1 / ah).ln()),
            bbox: b,
        });
    }
    Ok(FrameTargets {
        assignments,
        num_slots: anchors.len() * gh * gw,
    })
}
