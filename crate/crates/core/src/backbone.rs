//! Small 2-D (key frame) and 3-D (clip) feature extractors.
//!
//! Both reduce an `H×W` input to an `H/S × W/S` grid. The 3-D extractor also
//! halves the clip depth in each stage until it reaches 1, then squeezes it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm, Conv2d, Conv3d, Mode, Parameterized, Visitor};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Channels of each stride-2 stage of the 2-D extractor; `log2(stride)` entries.
    pub widths_2d: Vec<usize>,
    /// Channels of each stride-2 stage of the 3-D extractor; `log2(stride)` entries.
    pub widths_3d: Vec<usize>,
    /// Output channels of the 2-D extractor (C'').
    pub out_2d: usize,
    /// Output channels of the 3-D extractor (C').
    pub out_3d: usize,
    /// Total spatial stride S, a power of two.
    pub stride: usize,
    /// Frames per clip D, a power of two.
    pub clip_len: usize,
    pub leaky_slope: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths_2d: vec![16, 32, 32],
            widths_3d: vec![16, 32, 32],
            out_2d: 32,
            out_3d: 32,
            stride: 8,
            clip_len: 8,
            leaky_slope: 0.1,
        }
    }
}

impl BackboneConfig {
    /// Full-size geometry: 224×224 inputs reduced by 32 to a 7×7 grid.
    pub fn full_scale() -> Self {
        Self {
            widths_2d: vec![8, 16, 32, 32, 64],
            widths_3d: vec![8, 16, 32, 32, 64],
            out_2d: 64,
            out_3d: 64,
            stride: 32,
            clip_len: 16,
            leaky_slope: 0.1,
        }
    }

    fn log2(v: usize, what: &str) -> Result<usize> {
        if v == 0 || !v.is_power_of_two() {
            return Err(Error::Config(format!("{what} must be a power of two, got {v}")));
        }
        Ok(v.trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let ns = Self::log2(self.stride, "backbone.stride")?;
        Self::log2(self.clip_len, "backbone.clip_len")?;
        if self.widths_2d.len() != ns || self.widths_3d.len() != ns {
            return Err(Error::Config(format!(
                "backbone widths need log2(stride) = {ns} entries, got {} (2d) and {} (3d)",
                self.widths_2d.len(),
                self.widths_3d.len()
            )));
        }
        if self.widths_2d.iter().chain(&self.widths_3d).any(|&w| w == 0) || self.out_2d == 0 || self.out_3d == 0 {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        Ok(())
    }

    /// Per-stage `(temporal stride, spatial stride)` of the 3-D extractor.
    ///
    /// Spatial halvings happen in the first `log2 S` stages, temporal halvings
    /// in the first `log2 D`; the stage count is the larger of the two.
    pub fn stage_strides_3d(&self) -> Vec<(usize, usize)> {
        let ns = self.stride.trailing_zeros() as usize;
        let nt = self.clip_len.trailing_zeros() as usize;
        (0..ns.max(nt))
            .map(|i| (if i < nt { 2 } else { 1 }, if i < ns { 2 } else { 1 }))
            .collect()
    }

    pub fn check_frame_size(&self, h: usize, w: usize) -> Result<()> {
        if !h.is_multiple_of(self.stride) || !w.is_multiple_of(self.stride) || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "frame size {h}x{w} is not divisible by the backbone stride {}",
                self.stride
            )));
        }
        Ok(())
    }
}

/// 2-D feature map of one key frame, `[C''×H'×W']`.
#[derive(Debug, Clone)]
pub struct TwoDFeature<T: Real> {
    pub tensor: Tensor<T>,
    pub video_id: String,
    pub key_frame: usize,
}

/// 3-D feature map of one clip with depth squeezed, `[C'×H'×W']`.
#[derive(Debug, Clone)]
pub struct ThreeDFeature<T: Real> {
    pub tensor: Tensor<T>,
    pub video_id: String,
    pub key_frame: usize,
}

#[derive(Debug, Clone)]
struct Block2d<T: Real> {
    conv: Conv2d<T>,
    norm: BatchNorm<T>,
}

/// Key-frame extractor: stages of `conv3×3/2 + norm + leaky-relu`, then a `conv3×3` to C''.
#[derive(Debug, Clone)]
pub struct Backbone2d<T: Real> {
    blocks: Vec<Block2d<T>>,
    slope: f64,
    stride: usize,
}

impl<T: Real> Backbone2d<T> {
    pub fn new(cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::new();
        let mut cin = 3;
        for &w in &cfg.widths_2d {
            blocks.push(Block2d {
                conv: Conv2d::new(cin, w, 3, 2, 1, false, rng),
                norm: BatchNorm::new(w),
            });
            cin = w;
        }
        blocks.push(Block2d {
            conv: Conv2d::new(cin, cfg.out_2d, 3, 1, 1, false, rng),
            norm: BatchNorm::new(cfg.out_2d),
        });
        Ok(Self {
            blocks,
            slope: cfg.leaky_slope,
            stride: cfg.stride,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map(|b| b.conv.out_channels()).unwrap_or(0)
    }

    /// `[N×3×H×W] -> [N×C''×H/S×W/S]`.
    pub fn forward(&self, frames: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match frames.shape() {
            &[_, 3, h, w] if h % self.stride == 0 && w % self.stride == 0 => {}
            s => {
                return Err(Error::shape(
                    "backbone2d",
                    format!("expected [N,3,H,W] with H, W divisible by {}, got {s:?}", self.stride),
                ))
            }
        }
        let mut x = frames.clone();
        for b in &self.blocks {
            x = b.norm.forward(&b.conv.forward(&x)?, mode)?.leaky_relu(self.slope);
        }
        Ok(x)
    }

    /// One key frame `[3×H×W]`.
    pub fn forward_2d(&self, key_frame: &Tensor<T>, video_id: &str, key: usize) -> Result<TwoDFeature<T>> {
        let s = key_frame.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::shape("forward_2d", format!("key frame {s:?} is not [3,H,W]")));
        }
        let y = self.forward(&key_frame.reshape(&[1, s[0], s[1], s[2]])?, Mode::Eval)?;
        let out = y.shape()[1..].to_vec();
        Ok(TwoDFeature {
            tensor: y.reshape(&out)?,
            video_id: video_id.to_string(),
            key_frame: key,
        })
    }
}

impl<T: Real> Parameterized<T> for Backbone2d<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.visit(&join(prefix, &format!("block{i}.conv")), v);
            b.norm.visit(&join(prefix, &format!("block{i}.norm")), v);
        }
    }
}

#[derive(Debug, Clone)]
struct Block3d<T: Real> {
    conv: Conv3d<T>,
    norm: BatchNorm<T>,
}

/// Clip extractor: stages of `conv3×3×3 + norm + relu` with the stride
/// schedule of [`BackboneConfig::stage_strides_3d`], then a `conv1×3×3` to C'.
#[derive(Debug, Clone)]
pub struct Backbone3d<T: Real> {
    blocks: Vec<Block3d<T>>,
    clip_len: usize,
    stride: usize,
    frozen: bool,
}

impl<T: Real> Backbone3d<T> {
    pub fn new(cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::new();
        let mut cin = 3;
        for (i, (st, ss)) in cfg.stage_strides_3d().into_iter().enumerate() {
            let w = *cfg.widths_3d.get(i).unwrap_or(cfg.widths_3d.last().expect("validated"));
            blocks.push(Block3d {
                conv: Conv3d::new(cin, w, [3, 3, 3], [st, ss, ss], [1, 1, 1], false, rng),
                norm: BatchNorm::new(w),
            });
            cin = w;
        }
        blocks.push(Block3d {
            conv: Conv3d::new(cin, cfg.out_3d, [1, 3, 3], [1, 1, 1], [0, 1, 1], false, rng),
            norm: BatchNorm::new(cfg.out_3d),
        });
        Ok(Self {
            blocks,
            clip_len: cfg.clip_len,
            stride: cfg.stride,
            frozen: false,
        })
    }

    pub fn clip_len(&self) -> usize {
        self.clip_len
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map(|b| b.conv.out_channels()).unwrap_or(0)
    }

    /// Excludes the parameters from optimizer updates; the detector also runs a frozen branch in evaluation mode.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// `[N×3×D×H×W] -> [N×C'×H/S×W/S]`.
    pub fn forward(&self, clips: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match clips.shape() {
            &[_, 3, d, h, w] if d == self.clip_len && h % self.stride == 0 && w % self.stride == 0 => {}
            s => {
                return Err(Error::shape(
                    "backbone3d",
                    format!(
                        "expected [N,3,{},H,W] with H, W divisible by {}, got {s:?}",
                        self.clip_len, self.stride
                    ),
                ))
            }
        }
        let mut x = clips.clone();
        for b in &self.blocks {
            x = b.norm.forward(&b.conv.forward(&x)?, mode)?.relu();
        }
        let s = x.shape().to_vec();
        debug_assert_eq!(s[2], 1, "depth must collapse to 1");
        x.reshape(&[s[0], s[1], s[3], s[4]])
    }

    /// One clip `[3×D×H×W]`.
    pub fn forward_3d(&self, clip: &Tensor<T>, video_id: &str, key: usize) -> Result<ThreeDFeature<T>> {
        let s = clip.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape("forward_3d", format!("clip {s:?} is not [3,D,H,W]")));
        }
        if s[1] != self.clip_len {
            return Err(Error::invalid(format!(
                "clip has {} frames, the 3-D backbone expects {}",
                s[1], self.clip_len
            )));
        }
        let y = self.forward(&clip.reshape(&[1, s[0], s[1], s[2], s[3]])?, Mode::Eval)?;
        let out = y.shape()[1..].to_vec();
        Ok(ThreeDFeature {
            tensor: y.reshape(&out)?,
            video_id: video_id.to_string(),
            key_frame: key,
        })
    }
}

impl<T: Real> Parameterized<T> for Backbone3d<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.visit(&join(prefix, &format!("block{i}.conv")), v);
            b.norm.visit(&join(prefix, &format!("block{i}.norm")), v);
        }
    }
}
