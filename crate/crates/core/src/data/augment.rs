use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ClipPixels;
use crate::bbox::BBox;
use crate::head::LabeledBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Boxes whose clipped area falls below this fraction of the image are dropped.
    pub min_area: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_prob: 0.5,
            scale_min: 0.8,
            scale_max: 1.2,
            min_area: 0.002,
        }
    }
}

/// One random transform: optional mirror, then `p ↦ p·scale + offset` in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub scale: f64,
    pub offset: (f64, f64),
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip: false,
        scale: 1.0,
        offset: (0.0, 0.0),
    };

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        if !cfg.enabled {
            return Self::IDENTITY;
        }
        let flip = rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0));
        let scale = if cfg.scale_max > cfg.scale_min {
            rng.gen_range(cfg.scale_min..=cfg.scale_max)
        } else {
            cfg.scale_min
        };
        let slack = 1.0 - scale;
        let (lo, hi) = (slack.min(0.0), slack.max(0.0));
        let mut off = || if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let offset = (off(), off());
        Self { flip, scale, offset }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.scale == 1.0 && self.offset == (0.0, 0.0)
    }

    pub fn apply_box(&self, b: &BBox) -> BBox {
        let b = if self.flip { b.flip_horizontal() } else { *b };
        BBox::new(
            b.x * self.scale + self.offset.0,
            b.y * self.scale + self.offset.1,
            b.w * self.scale,
            b.h * self.scale,
        )
        .clip_unit()
    }
}

fn resample(frame: &[f32], h: usize, w: usize, draw: &AugmentDraw) -> Vec<f32> {
    let hw = h * w;
    let mut out = vec![0.0f32; 3 * hw];
    let fill: Vec<f32> = (0..3).map(|c| frame[c * hw..(c + 1) * hw].iter().sum::<f32>() / hw as f32).collect();
    for y in 0..h {
        let v = ((y as f64 + 0.5) / h as f64 - draw.offset.1) / draw.scale;
        for x in 0..w {
            let mut u = ((x as f64 + 0.5) / w as f64 - draw.offset.0) / draw.scale;
            if draw.flip {
                u = 1.0 - u;
            }
            if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                for c in 0..3 {
                    out[c * hw + y * w + x] = fill[c];
                }
                continue;
            }
            let sx = (u * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let sy = (v * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for c in 0..3 {
                let p = &frame[c * hw..(c + 1) * hw];
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out[c * hw + y * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Applies one transform to every frame and box; `mirror[c]` is the class
/// that `c` becomes under a horizontal flip.
pub fn augment(clip: &ClipPixels, boxes: &[LabeledBox], draw: &AugmentDraw, mirror: &[usize], min_area: f64) -> (ClipPixels, Vec<LabeledBox>) {
    let out_boxes = boxes
        .iter()
        .filter_map(|b| {
            let nb = draw.apply_box(&b.bbox);
            (nb.area() >= min_area && nb.w > 0.0 && nb.h > 0.0).then(|| LabeledBox {
                bbox: nb,
                class: if draw.flip { mirror.get(b.class).copied().unwrap_or(b.class) } else { b.class },
            })
        })
        .collect();
    if draw.is_identity() {
        return (clip.clone(), out_boxes);
    }
    let frames = clip.frames.iter().map(|f| resample(f, clip.height, clip.width, draw)).collect();
    (
        ClipPixels {
            frames,
            height: clip.height,
            width: clip.width,
        },
        out_boxes,
    )
}
