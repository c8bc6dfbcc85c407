//! Long-term feature bank: 3-D features of non-overlapping clips, averaged around a key frame.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone3d, ThreeDFeature};
use crate::data::{sample_clip, AnnotatedVideo, ClipSpec, HistoryPad};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::{no_grad, Real, Tensor};

const INDEX_HEADER: &str = "# actloc feature bank v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LfbConfig {
    pub enabled: bool,
    /// Number of clip features averaged per query.
    pub window: usize,
}

impl Default for LfbConfig {
    fn default() -> Self {
        Self { enabled: false, window: 8 }
    }
}

/// Per-clip 3-D features of one video; entry `i` covers frames `i·D .. i·D + D`.
#[derive(Debug, Clone)]
pub struct FeatureBank<T: Real> {
    pub video_id: String,
    pub clip_len: usize,
    features: Vec<Tensor<T>>,
}

impl<T: Real> FeatureBank<T> {
    pub fn from_features(video_id: &str, clip_len: usize, features: Vec<Tensor<T>>) -> Result<Self> {
        let Some(first) = features.first() else {
            return Err(Error::invalid(format!("feature bank for {video_id} has no entries")));
        };
        if clip_len == 0 {
            return Err(Error::invalid("feature bank clip length must be positive"));
        }
        if let Some(f) = features.iter().find(|f| f.shape() != first.shape()) {
            return Err(Error::shape(
                "feature bank",
                format!("entries {:?} and {:?} differ", first.shape(), f.shape()),
            ));
        }
        Ok(Self {
            video_id: video_id.to_string(),
            clip_len,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_shape(&self) -> &[usize] {
        self.features[0].shape()
    }

    pub fn clip_start(&self, i: usize) -> usize {
        i * self.clip_len
    }

    pub fn entry(&self, i: usize) -> &Tensor<T> {
        &self.features[i]
    }

    /// Index of the stored clip containing frame `key`; trailing frames map to the last clip.
    pub fn clip_of(&self, key: usize) -> usize {
        (key / self.clip_len).min(self.len() - 1)
    }

    /// Clip range averaged for `key`: the containing clip, ⌊(window−1)/2⌋ before and the rest after, truncated.
    pub fn selection(&self, key: usize, window: usize) -> std::ops::Range<usize> {
        let window = window.max(1);
        let c = self.clip_of(key);
        let before = (window - 1) / 2;
        let after = window - 1 - before;
        c.saturating_sub(before)..(c + after + 1).min(self.len())
    }

    /// Elementwise mean of the selected entries.
    pub fn query(&self, key: usize, window: usize) -> ThreeDFeature<T> {
        let sel = self.selection(key, window);
        let n = sel.len();
        let mut acc = vec![0.0f64; self.features[0].numel()];
        for f in &self.features[sel] {
            for (a, v) in acc.iter_mut().zip(f.values()) {
                *a += v.f64();
            }
        }
        let data = acc.into_iter().map(|a| T::of(a / n as f64)).collect();
        ThreeDFeature {
            tensor: Tensor::new(self.feature_shape(), data).expect("shape matches stored entries"),
            video_id: self.video_id.clone(),
            key_frame: key,
        }
    }

    fn index_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{INDEX_HEADER}");
        let _ = writeln!(s, "video {}", self.video_id);
        let _ = writeln!(s, "clip_len {}", self.clip_len);
        let shape: Vec<String> = self.feature_shape().iter().map(usize::to_string).collect();
        let _ = writeln!(s, "shape {}", shape.join(" "));
        let _ = writeln!(s, "clips {}", self.len());
        let _ = writeln!(s, "non_causal true");
        s
    }

    /// Writes `index.txt` plus one little-endian f64 blob per clip.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (i, f) in self.features.iter().enumerate() {
            let bytes: Vec<u8> = f.values().iter().flat_map(|v| v.f64().to_le_bytes()).collect();
            let p = blob_path(dir, self.clip_start(i));
            std::fs::write(&p, bytes).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
        }
        let p = dir.join("index.txt");
        std::fs::write(&p, self.index_text()).map_err(|e| Error::io(format!("writing {}", p.display()), e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ip = dir.join("index.txt");
        let text = std::fs::read_to_string(&ip).map_err(|e| Error::io(format!("reading {}", ip.display()), e))?;
        let err = |line: usize, msg: String| Error::Parse {
            path: ip.clone(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l.trim()) != Some(INDEX_HEADER) {
            return Err(err(1, format!("missing header {INDEX_HEADER:?}")));
        }
        let (mut video, mut clip_len, mut shape, mut clips) = (None, None, None, None);
        for (i, line) in lines {
            let mut f = line.split_whitespace();
            let (Some(key), rest) = (f.next(), f.collect::<Vec<_>>()) else { continue };
            let num = |s: &str| s.parse::<usize>().map_err(|_| err(i + 1, format!("bad number {s:?}")));
            match (key, rest.as_slice()) {
                ("video", [id]) => video = Some(id.to_string()),
                ("clip_len", [n]) => clip_len = Some(num(n)?),
                ("clips", [n]) => clips = Some(num(n)?),
                ("shape", dims) => shape = Some(dims.iter().map(|d| num(d)).collect::<Result<Vec<_>>>()?),
                ("non_causal", _) => {}
                _ => return Err(err(i + 1, format!("unexpected line {line:?}"))),
            }
        }
        let missing = |what: &str| err(0, format!("index lacks a {what} line"));
        let (video, clip_len) = (video.ok_or_else(|| missing("video"))?, clip_len.ok_or_else(|| missing("clip_len"))?);
        let (shape, clips) = (shape.ok_or_else(|| missing("shape"))?, clips.ok_or_else(|| missing("clips"))?);
        let numel: usize = shape.iter().product();
        let mut features = Vec::with_capacity(clips);
        for i in 0..clips {
            let p = blob_path(dir, i * clip_len);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            if bytes.len() != numel * 8 {
                return Err(Error::Checkpoint(format!(
                    "{} holds {} bytes, shape {shape:?} needs {}",
                    p.display(),
                    bytes.len(),
                    numel * 8
                )));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
                .collect();
            features.push(Tensor::new(&shape, data)?);
        }
        Self::from_features(&video, clip_len, features)
    }
}

fn blob_path(dir: &Path, start: usize) -> PathBuf {
    dir.join(format!("clip_{start:05}.bin"))
}

/// Runs the 3-D branch in evaluation mode over every full non-overlapping window of `video`.
pub fn build_bank<T: Real>(video: &AnnotatedVideo, backbone: &Backbone3d<T>) -> Result<FeatureBank<T>> {
    let d = backbone.clip_len();
    let n = video.num_frames() / d;
    if n == 0 {
        return Err(Error::invalid(format!(
            "video {} has {} frames, fewer than one {d}-frame clip",
            video.id,
            video.num_frames()
        )));
    }
    let spec = ClipSpec {
        clip_len: d,
        downsample: 1,
        pad: HistoryPad::Repeat,
    };
    let features = no_grad(|| {
        (0..n)
            .map(|i| {
                let (clip, _) = sample_clip::<T>(video, i * d + d - 1, &spec)?;
                let s = clip.shape().to_vec();
                let y = backbone.forward(&clip.reshape(&[1, s[0], s[1], s[2], s[3]])?, Mode::Eval)?;
                let out = y.shape()[1..].to_vec();
                y.reshape(&out)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    FeatureBank::from_features(&video.id, d, features)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(values: &[f64]) -> FeatureBank<f64> {
        let f = values.iter().map(|&v| Tensor::full(&[2, 1, 1], v)).collect();
        FeatureBank::from_features("v", 8, f).unwrap()
    }

    #[test]
    fn selection_centres_on_the_key_clip() {
        let b = bank(&[0.0; 20]);
        assert_eq!(b.selection(80, 8), 7..15);
        assert_eq!(b.selection(80, 1), 10..11);
        assert_eq!(b.selection(3, 8), 0..5);
        assert_eq!(b.selection(159, 8), 16..20);
        assert_eq!(b.selection(500, 2), 19..20);
    }

    #[test]
    fn query_means() {
        let b = bank(&[1.0, 3.0]);
        assert_eq!(b.query(0, 2).tensor.to_f64_vec(), vec![2.0, 2.0]);
        let b = bank(&[1.0, 2.0, 6.0]);
        assert_eq!(b.query(0, 8).tensor.to_f64_vec(), vec![3.0, 3.0]);
        assert_eq!(b.query(9, 1).tensor.to_f64_vec(), vec![2.0, 2.0]);
    }

    #[test]
    fn disk_round_trip() {
        let b = bank(&[0.1, -2.5, 1.0 / 3.0]);
        let dir = std::env::temp_dir().join(format!("actloc-lfb-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        b.save(&dir).unwrap();
        let back = FeatureBank::<f64>::load(&dir).unwrap();
        assert_eq!(back.len(), 3);
        for i in 0..3 {
            assert_eq!(back.entry(i).to_f64_vec(), b.entry(i).to_f64_vec());
        }
        assert!(std::fs::read_to_string(dir.join("index.txt")).unwrap().contains("non_causal true"));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let f = vec![Tensor::<f64>::zeros(&[2, 1, 1]), Tensor::zeros(&[1, 2, 1])];
        assert!(FeatureBank::from_features("v", 8, f).is_err());
    }
}
