//! Frame detections to class-labeled action tubes by best-path extraction.

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::head::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkConfig {
    /// Weight of the score product term.
    pub alpha: f64,
    /// Weight of the overlap term.
    pub beta: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.5 }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config("link.alpha and link.beta must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TubeEntry {
    pub frame: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTube {
    pub class: usize,
    pub entries: Vec<TubeEntry>,
}

impl ActionTube {
    /// Mean per-frame score.
    pub fn score(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.entries.iter().map(|e| e.score).sum::<f64>() / self.entries.len() as f64
        }
    }

    pub fn first_frame(&self) -> Option<usize> {
        self.entries.first().map(|e| e.frame)
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.entries.last().map(|e| e.frame)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn box_at(&self, frame: usize) -> Option<BBox> {
        let first = self.first_frame()?;
        if frame < first {
            return None;
        }
        self.entries.get(frame - first).filter(|e| e.frame == frame).map(|e| e.bbox)
    }

    /// Frames strictly increase by one from entry to entry.
    pub fn is_gap_free(&self) -> bool {
        self.entries.windows(2).all(|w| w[1].frame == w[0].frame + 1)
    }
}

/// Pairwise affinity of consecutive-frame boxes, zero unless they overlap.
pub fn link_score(s1: f64, s2: f64, overlap: f64, cfg: &LinkConfig) -> f64 {
    if overlap > 0.0 {
        s1 + s2 + cfg.alpha * s1 * s2 + cfg.beta * overlap
    } else {
        0.0
    }
}

fn pair_score(a: &Detection, b: &Detection, class: usize, cfg: &LinkConfig) -> f64 {
    link_score(a.score(class), b.score(class), a.bbox.iou(&b.bbox), cfg)
}

/// Highest-scoring path through non-empty consecutive frames, choosing one
/// detection per frame; ties go to lower detection indices.
///
/// Returns the chosen index per frame and the summed link score.
pub fn best_path(frames: &[Vec<Detection>], class: usize, cfg: &LinkConfig) -> Result<(Vec<usize>, f64)> {
    if frames.is_empty() || frames.iter().any(|f| f.is_empty()) {
        return Err(Error::invalid("best_path needs at least one frame and a detection in every frame"));
    }
    let mut value: Vec<f64> = vec![0.0; frames[0].len()];
    let mut back: Vec<Vec<usize>> = vec![Vec::new()];
    for t in 1..frames.len() {
        let mut next = Vec::with_capacity(frames[t].len());
        let mut arg = Vec::with_capacity(frames[t].len());
        for b in &frames[t] {
            let mut best = (0, f64::NEG_INFINITY);
            for (i, a) in frames[t - 1].iter().enumerate() {
                let v = value[i] + pair_score(a, b, class, cfg);
                if v > best.1 {
                    best = (i, v);
                }
            }
            next.push(best.1);
            arg.push(best.0);
        }
        value = next;
        back.push(arg);
    }
    let mut end = 0;
    for (i, &v) in value.iter().enumerate() {
        if v > value[end] {
            end = i;
        }
    }
    let total = value[end];
    let mut path = vec![0; frames.len()];
    path[frames.len() - 1] = end;
    for t in (1..frames.len()).rev() {
        path[t - 1] = back[t][path[t]];
    }
    Ok((path, total))
}

/// Tubes for class `class` from per-frame detections (`frames[i]` holds frame `i`).
///
/// Each round takes a maximal run of non-empty frames, extracts its best
/// path, cuts the path at non-overlapping links, and removes its boxes.
/// Rounds repeat until every detection belongs to a tube.
pub fn viterbi_link(frames: &[Vec<Detection>], class: usize, cfg: &LinkConfig) -> Result<Vec<ActionTube>> {
    let mut remaining: Vec<Vec<Detection>> = frames.to_vec();
    let mut tubes = Vec::new();
    while let Some(start) = remaining.iter().position(|f| !f.is_empty()) {
        let end = remaining[start..].iter().position(|f| f.is_empty()).map_or(remaining.len(), |p| start + p);
        let run = &remaining[start..end];
        let (path, _) = best_path(run, class, cfg)?;
        let mut current: Vec<TubeEntry> = Vec::new();
        for (off, &i) in path.iter().enumerate() {
            let d = &run[off][i];
            if off > 0 {
                let prev = &run[off - 1][path[off - 1]];
                if prev.bbox.iou(&d.bbox) <= 0.0 {
                    tubes.push(ActionTube {
                        class,
                        entries: std::mem::take(&mut current),
                    });
                }
            }
            current.push(TubeEntry {
                frame: start + off,
                bbox: d.bbox,
                score: d.score(class),
            });
        }
        tubes.push(ActionTube { class, entries: current });
        for (off, &i) in path.iter().enumerate() {
            remaining[start + off].remove(i);
        }
    }
    tubes.sort_by(|a, b| a.first_frame().cmp(&b.first_frame()).then(b.score().total_cmp(&a.score())));
    Ok(tubes)
}
