//! Annotated videos: synthetic generation, clip sampling, augmentation, storage.

mod annotations;
mod augment;
mod clip;
mod store;
mod synth;

pub use annotations::{load_annotations, parse_annotations, save_annotations, write_annotations};
pub use augment::{augment, AugmentConfig, AugmentDraw};
pub use clip::{clip_indices, sample_clip, ClipPixels, ClipSpec, HistoryPad};
pub use store::{load_dataset, save_dataset, Manifest, ManifestEntry};
pub use synth::{synth_generate, Motion, SynthConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::head::LabeledBox;

/// Deterministic generator for `(seed, domain, index)`; distinct triples give independent streams.
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Which part of a dataset a video belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Frames stored as 8-bit planar RGB (`3×H×W` per frame) plus per-frame boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedVideo {
    pub id: String,
    pub split: Split,
    /// Video-level action class.
    pub class: usize,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Vec<u8>>,
    pub annotations: Vec<Vec<LabeledBox>>,
}

impl AnnotatedVideo {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_len(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::invalid(format!("video {} has no frames", self.id)));
        }
        if self.annotations.len() != self.frames.len() {
            return Err(Error::invalid(format!(
                "video {}: {} annotation frames for {} frames",
                self.id,
                self.annotations.len(),
                self.frames.len()
            )));
        }
        if let Some(i) = self.frames.iter().position(|f| f.len() != self.frame_len()) {
            return Err(Error::invalid(format!("video {}: frame {i} has the wrong size", self.id)));
        }
        for (t, boxes) in self.annotations.iter().enumerate() {
            for b in boxes {
                let r = b.bbox;
                let eps = 1e-9;
                if !(r.x >= -eps && r.y >= -eps && r.x + r.w <= 1.0 + eps && r.y + r.h <= 1.0 + eps && r.w > 0.0 && r.h > 0.0) {
                    return Err(Error::invalid(format!("video {} frame {t}: box {r:?} leaves the unit square", self.id)));
                }
            }
        }
        Ok(())
    }

    /// Frame `t` scaled to `[0, 1]`.
    pub fn frame_f32(&self, t: usize) -> Vec<f32> {
        self.frames[t].iter().map(|&v| v as f32 / 255.0).collect()
    }
}

/// Videos plus the class names they index into.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub videos: Vec<AnnotatedVideo>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &AnnotatedVideo> {
        self.videos.iter().filter(move |v| v.split == split)
    }

    /// Class id each class maps to under a horizontal flip (identity when no mirror exists).
    pub fn mirror_map(&self) -> Vec<usize> {
        self.class_names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let m = match n.as_str() {
                    "left" => "right",
                    "right" => "left",
                    other => other,
                };
                self.class_names.iter().position(|x| x == m).unwrap_or(i)
            })
            .collect()
    }

    /// Ground-truth box counts per class over a split.
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for v in self.split(split) {
            for b in v.annotations.iter().flatten() {
                if b.class < counts.len() {
                    counts[b.class] += 1;
                }
            }
        }
        counts
    }
}
