use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{stream_rng, AnnotatedVideo, Dataset, Split};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::head::LabeledBox;

/// A motion program; the class of a synthetic video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Grow,
    Shrink,
}

impl Motion {
    pub fn name(self) -> &'static str {
        match self {
            Motion::Left => "left",
            Motion::Right => "right",
            Motion::Up => "up",
            Motion::Down => "down",
            Motion::Grow => "grow",
            Motion::Shrink => "shrink",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: Vec<Motion>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Object side length range, as a fraction of the image side.
    pub size_min: f64,
    pub size_max: f64,
    /// Per-frame displacement range, as a fraction of the image side.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Standard deviation of the per-pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: vec![Motion::Left, Motion::Right, Motion::Up, Motion::Down],
            train_per_class: 100,
            test_per_class: 30,
            frames: 40,
            height: 64,
            width: 64,
            size_min: 0.2,
            size_max: 0.3,
            speed_min: 0.008,
            speed_max: 0.012,
            noise: 0.04,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("synthetic data needs at least two classes".into()));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("frames, height and width must be positive".into()));
        }
        if !(0.0 < self.size_min && self.size_min <= self.size_max && self.size_max < 1.0) {
            return Err(Error::Config(format!(
                "object size range [{}, {}] must lie inside (0, 1)",
                self.size_min, self.size_max
            )));
        }
        if self.size_min * (self.height.min(self.width) as f64) < 2.0 {
            return Err(Error::Config("objects would be smaller than two pixels".into()));
        }
        if !(0.0 <= self.speed_min && self.speed_min <= self.speed_max) || !(self.noise >= 0.0) {
            return Err(Error::Config("speed range and noise must be non-negative".into()));
        }
        let travel = self.speed_max * (self.frames.saturating_sub(1)) as f64;
        if travel > 1.0 - self.size_max {
            return Err(Error::Config(format!(
                "objects of size {} cannot travel {travel:.3} inside the frame",
                self.size_max
            )));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|m| m.name().to_string()).collect()
    }
}

/// One object trajectory: per-frame center and side length.
struct Track {
    centers: Vec<(f64, f64)>,
    sizes: Vec<f64>,
}

/// Position along one axis drawn from the frame-pooled marginal of a moving coordinate.
fn pooled_position(rng: &mut impl Rng, lo: f64, hi: f64, travel: f64, step: f64, frames: usize) -> f64 {
    let start = rng.gen_range(lo..=hi - travel);
    start + step * rng.gen_range(0..frames) as f64
}

fn track(motion: Motion, cfg: &SynthConfig, rng: &mut impl Rng) -> Track {
    let n = cfg.frames;
    let last = (n - 1) as f64;
    let speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
    match motion {
        Motion::Left | Motion::Right | Motion::Up | Motion::Down => {
            let s = rng.gen_range(cfg.size_min..=cfg.size_max);
            let (lo, hi) = (s / 2.0, 1.0 - s / 2.0);
            let travel = speed * last;
            let forward = matches!(motion, Motion::Right | Motion::Down);
            let start = if forward {
                rng.gen_range(lo..=hi - travel)
            } else {
                rng.gen_range(lo + travel..=hi)
            };
            let other = pooled_position(rng, lo, hi, travel, speed, n);
            let centers = (0..n)
                .map(|t| {
                    let d = speed * t as f64;
                    let p = if forward { start + d } else { start - d };
                    if matches!(motion, Motion::Left | Motion::Right) {
                        (p, other)
                    } else {
                        (other, p)
                    }
                })
                .collect();
            Track {
                centers,
                sizes: vec![s; n],
            }
        }
        Motion::Grow | Motion::Shrink => {
            let span = (cfg.size_max - cfg.size_min) * rng.gen_range(0.6..=1.0);
            let s0 = rng.gen_range(cfg.size_min..=cfg.size_max - span);
            let (lo, hi) = (cfg.size_max / 2.0, 1.0 - cfg.size_max / 2.0);
            let center = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
            let sizes = (0..n)
                .map(|t| {
                    let f = if n > 1 { t as f64 / last } else { 0.0 };
                    let f = if motion == Motion::Grow { f } else { 1.0 - f };
                    s0 + span * f
                })
                .collect();
            Track {
                centers: vec![center; n],
                sizes,
            }
        }
    }
}

/// Length of `[a, b] ∩ [i, i+1]`.
fn overlap(a: f64, b: f64, i: usize) -> f64 {
    let (lo, hi) = (i as f64, i as f64 + 1.0);
    (b.min(hi) - a.max(lo)).max(0.0)
}

/// Square object with exact per-pixel area coverage over a flat background plus noise.
fn render(b: &BBox, h: usize, w: usize, bg: [f64; 3], fg: [f64; 3], noise: f64, rng: &mut impl Rng) -> Vec<u8> {
    let (x0, x1) = (b.x * w as f64, (b.x + b.w) * w as f64);
    let (y0, y1) = (b.y * h as f64, (b.y + b.h) * h as f64);
    let cov_x: Vec<f64> = (0..w).map(|i| overlap(x0, x1, i)).collect();
    let cov_y: Vec<f64> = (0..h).map(|j| overlap(y0, y1, j)).collect();
    // uniform noise with the requested standard deviation
    let amp = noise * 3f64.sqrt();
    let mut out = vec![0u8; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let cov = cov_x[x] * cov_y[y];
                let mut v = bg[c] * (1.0 - cov) + fg[c] * cov;
                if amp > 0.0 {
                    v += rng.gen_range(-amp..=amp);
                }
                out[(c * h + y) * w + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    out
}

const SYNTH_DOMAIN: u64 = 0x5359_4e54;

/// Deterministic dataset: `train_per_class` then `test_per_class` videos per class.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut videos = Vec::new();
    let mut index = 0u64;
    for (split, per_class) in [(Split::Train, cfg.train_per_class), (Split::Test, cfg.test_per_class)] {
        for (class, motion) in cfg.classes.iter().enumerate() {
            for i in 0..per_class {
                let mut rng = stream_rng(cfg.seed, SYNTH_DOMAIN, index);
                index += 1;
                let tr = track(*motion, cfg, &mut rng);
                let level = rng.gen_range(0.1..=0.4);
                let bg = [level; 3];
                let fg = [rng.gen_range(0.65..=1.0), rng.gen_range(0.65..=1.0), rng.gen_range(0.65..=1.0)];
                let mut frames = Vec::with_capacity(cfg.frames);
                let mut annotations = Vec::with_capacity(cfg.frames);
                for (c, s) in tr.centers.iter().zip(&tr.sizes) {
                    let b = BBox::from_center(c.0, c.1, *s, *s);
                    frames.push(render(&b, cfg.height, cfg.width, bg, fg, cfg.noise, &mut rng));
                    annotations.push(vec![LabeledBox { bbox: b, class }]);
                }
                videos.push(AnnotatedVideo {
                    id: format!("{}_{}_{i:03}", split.as_str(), motion.name()),
                    split,
                    class,
                    height: cfg.height,
                    width: cfg.width,
                    frames,
                    annotations,
                });
            }
        }
    }
    Ok(Dataset {
        class_names: cfg.class_names(),
        videos,
    })
}
