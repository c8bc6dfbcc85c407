//! Activation heatmaps of the two backbones overlaid on the key frame.

use image::{ImageBuffer, Rgb, RgbImage};

use crate::data::{sample_clip, AnnotatedVideo, ClipSpec};
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::nn::Mode;
use crate::tensor::{no_grad, Real, Tensor};

/// A spatial map in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl Heatmap {
    /// Channel mean of `|f|` over a `[C×H×W]` feature map.
    pub fn from_feature<T: Real>(f: &Tensor<T>) -> Result<Self> {
        let &[c, h, w] = f.shape() else {
            return Err(Error::shape("heatmap", format!("expected [C,H,W], got {:?}", f.shape())));
        };
        let v = f.values();
        let values = (0..h * w)
            .map(|i| (0..c).map(|k| v[k * h * w + i].f64().abs()).sum::<f64>() / c as f64)
            .collect();
        Ok(Self { values, height: h, width: w })
    }

    /// Bilinear resampling with pixel centres aligned.
    pub fn upsample(&self, height: usize, width: usize) -> Self {
        let (h, w) = (self.height, self.width);
        let at = |y: usize, x: usize| self.values[y * w + x];
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * h as f64 / height as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let (y0, fy) = (sy.floor() as usize, sy - sy.floor());
            let y1 = (y0 + 1).min(h - 1);
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * w as f64 / width as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let (x0, fx) = (sx.floor() as usize, sx - sx.floor());
                let x1 = (x0 + 1).min(w - 1);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                values.push(top * (1.0 - fy) + bot * fy);
            }
        }
        Self { values, height, width }
    }

    /// Rescaled to `[0, 1]`; a constant map becomes all zeros.
    pub fn normalized(&self) -> Self {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let values = self.values.iter().map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect();
        Self {
            values,
            height: self.height,
            width: self.width,
        }
    }
}

fn heat_color(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [(3.0 * t).min(1.0), (3.0 * t - 1.0).clamp(0.0, 1.0), (3.0 * t - 2.0).clamp(0.0, 1.0)]
}

/// Blends a normalized heatmap of the frame's size over planar 8-bit RGB.
pub fn overlay(frame: &[u8], heat: &Heatmap, opacity: f64) -> RgbImage {
    let (h, w) = (heat.height, heat.width);
    let hw = h * w;
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let c = heat_color(heat.values[i]);
        let px = |k: usize| ((1.0 - opacity) * frame[k * hw + i] as f64 + opacity * 255.0 * c[k]).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Heatmaps of the 2-D and 3-D branch outputs at `key`, upsampled to the frame size and normalized.
pub fn branch_heatmaps<T: Real>(
    model: &Detector<T>,
    video: &AnnotatedVideo,
    key: usize,
    clip: &ClipSpec,
) -> Result<(Option<Heatmap>, Option<Heatmap>)> {
    let (c, k) = sample_clip::<T>(video, key, clip)?;
    let cs = c.shape().to_vec();
    let ks = k.shape().to_vec();
    no_grad(|| {
        let f2 = model.features_2d(&k.reshape(&[1, ks[0], ks[1], ks[2]])?, Mode::Eval)?;
        let f3 = model.features_3d(&c.reshape(&[1, cs[0], cs[1], cs[2], cs[3]])?, Mode::Eval)?;
        let map = |f: Option<Tensor<T>>| -> Result<Option<Heatmap>> {
            f.map(|f| {
                let s = f.shape()[1..].to_vec();
                Ok(Heatmap::from_feature(&f.reshape(&s)?)?.upsample(video.height, video.width).normalized())
            })
            .transpose()
        };
        Ok((map(f2)?, map(f3)?))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_mean_of_magnitudes() {
        let f = Tensor::<f64>::from_f64(&[2, 1, 2], &[1.0, -2.0, -3.0, 4.0]).unwrap();
        assert_eq!(Heatmap::from_feature(&f).unwrap().values, vec![2.0, 3.0]);
    }

    #[test]
    fn upsampling_preserves_constants_and_corners() {
        let m = Heatmap {
            values: vec![0.0, 1.0, 2.0, 3.0],
            height: 2,
            width: 2,
        };
        let u = m.upsample(8, 8);
        assert_eq!(u.values[0], 0.0);
        assert_eq!(u.values[63], 3.0);
        let c = Heatmap {
            values: vec![0.5; 4],
            height: 2,
            width: 2,
        };
        assert!(c.upsample(5, 3).values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn overlay_with_zero_opacity_is_the_frame() {
        let frame: Vec<u8> = (0..3 * 4).map(|i| (i * 20) as u8).collect();
        let heat = Heatmap {
            values: vec![1.0; 4],
            height: 2,
            width: 2,
        };
        let img = overlay(&frame, &heat, 0.0);
        assert_eq!(img.get_pixel(1, 1).0, [60, 140, 220]);
    }
}
