use serde::{Deserialize, Serialize};

use super::AnnotatedVideo;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Behaviour when a clip reaches back past the first frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistoryPad {
    /// Repeat the first frame.
    Repeat,
    /// Key frames without full history are not sampled.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipSpec {
    pub clip_len: usize,
    pub downsample: usize,
    pub pad: HistoryPad,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            clip_len: 8,
            downsample: 1,
            pad: HistoryPad::Repeat,
        }
    }
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 || self.downsample == 0 {
            return Err(Error::Config("clip length and downsampling rate must be positive".into()));
        }
        Ok(())
    }

    /// Whether `key` is a usable key frame under the padding rule.
    pub fn admits(&self, key: usize) -> bool {
        match self.pad {
            HistoryPad::Repeat => true,
            HistoryPad::Skip => key >= (self.clip_len - 1) * self.downsample,
        }
    }
}

/// Frame indices `key − (D−1)·d, …, key − d, key`, clamped at 0.
pub fn clip_indices(key: usize, clip_len: usize, downsample: usize) -> Vec<usize> {
    (0..clip_len)
        .map(|i| key.saturating_sub((clip_len - 1 - i) * downsample))
        .collect()
}

/// Float pixels of one clip: frames `[D][3×H×W]`, the last being the key frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipPixels {
    pub frames: Vec<Vec<f32>>,
    pub height: usize,
    pub width: usize,
}

impl ClipPixels {
    pub fn from_video(video: &AnnotatedVideo, key: usize, spec: &ClipSpec) -> Result<Self> {
        if key >= video.num_frames() {
            return Err(Error::invalid(format!(
                "key frame {key} out of range for video {} with {} frames",
                video.id,
                video.num_frames()
            )));
        }
        spec.validate()?;
        Ok(Self {
            frames: clip_indices(key, spec.clip_len, spec.downsample).into_iter().map(|t| video.frame_f32(t)).collect(),
            height: video.height,
            width: video.width,
        })
    }

    pub fn key(&self) -> &[f32] {
        self.frames.last().expect("clips are non-empty")
    }

    /// `[3×D×H×W]` layout.
    pub fn clip_values(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let d = self.frames.len();
        let mut out = vec![0.0; 3 * d * hw];
        for (t, f) in self.frames.iter().enumerate() {
            for c in 0..3 {
                out[(c * d + t) * hw..(c * d + t + 1) * hw].copy_from_slice(&f[c * hw..(c + 1) * hw]);
            }
        }
        out
    }
}

/// `(clip [3×D×H×W], key frame [3×H×W])`, the key frame being the clip's last frame.
pub fn sample_clip<T: Real>(video: &AnnotatedVideo, key: usize, spec: &ClipSpec) -> Result<(Tensor<T>, Tensor<T>)> {
    let px = ClipPixels::from_video(video, key, spec)?;
    let (h, w) = (px.height, px.width);
    let clip = Tensor::new(&[3, spec.clip_len, h, w], px.clip_values().into_iter().map(|v| T::of(v as f64)).collect())?;
    let key = Tensor::new(&[3, h, w], px.key().iter().map(|&v| T::of(v as f64)).collect())?;
    Ok((clip, key))
}
