use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bbox::centered_iou;
use crate::error::{Error, Result};

/// Prior `(width, height)` pairs in grid-cell units.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    sizes: Vec<(f64, f64)>,
}

impl AnchorSet {
    pub fn new(sizes: Vec<(f64, f64)>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::invalid("an anchor set needs at least one anchor"));
        }
        if let Some(&(w, h)) = sizes.iter().find(|(w, h)| !(*w > 0.0 && *h > 0.0 && w.is_finite() && h.is_finite())) {
            return Err(Error::invalid(format!("anchor ({w}, {h}) is not strictly positive")));
        }
        Ok(Self { sizes })
    }

    /// Five squares and near-squares spanning small to large objects on an 8×8 grid.
    pub fn default_for_grid(grid: usize) -> Self {
        let g = grid as f64 / 8.0;
        Self::new(vec![(1.2 * g, 1.2 * g), (1.6 * g, 1.6 * g), (2.0 * g, 2.0 * g), (2.4 * g, 2.4 * g), (2.9 * g, 2.9 * g)])
            .expect("positive defaults")
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn get(&self, i: usize) -> (f64, f64) {
        self.sizes[i]
    }

    pub fn sizes(&self) -> &[(f64, f64)] {
        &self.sizes
    }

    /// Index of the anchor with the highest co-centered IoU; ties go to the lowest index.
    pub fn best_match(&self, wh: (f64, f64)) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &a) in self.sizes.iter().enumerate() {
            let v = centered_iou(wh, a);
            if v > best.1 {
                best = (i, v);
            }
        }
        best.0
    }

    /// `k` lines of `"w h"`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (w, h) in &self.sizes {
            let _ = writeln!(s, "{w} {h}");
        }
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut sizes = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.into(),
                line: i + 1,
                msg,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(err(format!("expected \"w h\", got {line:?}")));
            }
            let num = |f: &str| f.parse::<f64>().map_err(|_| err(format!("bad number {f:?}")));
            let (w, h) = (num(fields[0])?, num(fields[1])?);
            if !(w > 0.0 && h > 0.0) {
                return Err(err(format!("anchor ({w}, {h}) is not strictly positive")));
            }
            sizes.push((w, h));
        }
        Self::new(sizes).map_err(|e| Error::Parse {
            path: origin.into(),
            line: 0,
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Mean `1 − IoU` of each box to its nearest centroid.
pub fn kmeans_objective(boxes: &[(f64, f64)], centroids: &[(f64, f64)]) -> f64 {
    let total: f64 = boxes.iter().map(|&b| 1.0 - centroids.iter().map(|&c| centered_iou(b, c)).fold(0.0, f64::max)).sum();
    total / boxes.len() as f64
}

fn cluster_cost(members: &[(f64, f64)], c: (f64, f64)) -> f64 {
    members.iter().map(|&b| 1.0 - centered_iou(b, c)).sum()
}

/// Best centroid for one cluster, searched in log-size space from the
/// better of `start` and the arithmetic mean; never worse than `start`.
fn refit_centroid(members: &[(f64, f64)], start: (f64, f64)) -> (f64, f64) {
    let n = members.len() as f64;
    let mean = (
        members.iter().map(|b| b.0).sum::<f64>() / n,
        members.iter().map(|b| b.1).sum::<f64>() / n,
    );
    let mut best = start;
    let mut cost = cluster_cost(members, start);
    let mean_cost = cluster_cost(members, mean);
    if mean_cost < cost {
        best = mean;
        cost = mean_cost;
    }
    let dirs = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0), (1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0)];
    let mut step = 0.25;
    let mut pos = (best.0.ln(), best.1.ln());
    while step > 1e-9 {
        let mut moved = false;
        for (dx, dy) in dirs {
            let cand = (pos.0 + dx * step, pos.1 + dy * step);
            let c = (cand.0.exp(), cand.1.exp());
            let v = cluster_cost(members, c);
            if v < cost {
                cost = v;
                best = c;
                pos = cand;
                moved = true;
                break;
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    best
}

fn assign(boxes: &[(f64, f64)], centroids: &[(f64, f64)]) -> Vec<usize> {
    boxes
        .iter()
        .map(|&b| {
            let mut best = (0, f64::NEG_INFINITY);
            for (i, &c) in centroids.iter().enumerate() {
                let v = centered_iou(b, c);
                if v > best.1 {
                    best = (i, v);
                }
            }
            best.0
        })
        .collect()
}

/// Lloyd iterations under `1 − IoU` starting from the given centroids.
///
/// Returns the centroids and the objective after every iteration.
pub fn kmeans_from(boxes: &[(f64, f64)], start: Vec<(f64, f64)>, max_iters: usize) -> (Vec<(f64, f64)>, Vec<f64>) {
    let mut centroids = start;
    let mut history = Vec::new();
    for _ in 0..max_iters {
        let labels = assign(boxes, &centroids);
        let mut next = centroids.clone();
        for (j, c) in next.iter_mut().enumerate() {
            let members: Vec<(f64, f64)> = boxes.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(b, _)| *b).collect();
            if !members.is_empty() {
                *c = refit_centroid(&members, *c);
            }
        }
        history.push(kmeans_objective(boxes, &next));
        if next == centroids {
            break;
        }
        centroids = next;
    }
    (centroids, history)
}

/// `k` anchors by k-means over `(w, h)` with distance `1 − IoU` of co-centered boxes.
///
/// Initial centroids are `k` distinct boxes drawn with the seed; at most 100 iterations.
pub fn kmeans_anchors(boxes: &[(f64, f64)], k: usize, seed: u64) -> Result<AnchorSet> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if let Some(b) = boxes.iter().find(|b| !(b.0 > 0.0 && b.1 > 0.0)) {
        return Err(Error::invalid(format!("box size {b:?} is not strictly positive")));
    }
    let mut seen = HashSet::new();
    let distinct: Vec<(f64, f64)> = boxes.iter().copied().filter(|b| seen.insert((b.0.to_bits(), b.1.to_bits()))).collect();
    if distinct.len() < k {
        return Err(Error::invalid(format!(
            "k-means needs at least {k} distinct boxes, got {}",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start: Vec<(f64, f64)> = sample(&mut rng, distinct.len(), k).into_iter().map(|i| distinct[i]).collect();
    let (mut centroids, _) = kmeans_from(boxes, start, 100);
    centroids.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)).then(a.0.total_cmp(&b.0)));
    AnchorSet::new(centroids)
}
