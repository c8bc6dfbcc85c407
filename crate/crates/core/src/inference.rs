//! Frame-level detection over whole videos, tube linking and ground-truth extraction.

use std::collections::BTreeMap;

use crate::data::{AnnotatedVideo, ClipPixels, ClipSpec};
use crate::error::{Error, Result};
use crate::head::{decode, Detection, RawGrid};
use crate::lfb::FeatureBank;
use crate::linker::{viterbi_link, ActionTube, LinkConfig, TubeEntry};
use crate::metrics::{DetectionRecord, GroundTruth, VideoTube};
use crate::model::Detector;
use crate::nn::Mode;
use crate::postprocess::{postprocess, NmsConfig};
use crate::tensor::{no_grad, Real, Tensor};

/// Where the 3-D branch input comes from at inference.
#[derive(Debug, Clone, Copy)]
pub enum Features3d<'a, T: Real> {
    /// Run the 3-D backbone on the clip ending at each key frame.
    Live,
    /// Average bank entries around each key frame.
    Bank { bank: &'a FeatureBank<T>, window: usize },
}

/// Stacks clips into `[N×3×D×H×W]` and `[N×3×H×W]`.
pub fn batch_inputs<T: Real>(clips: &[ClipPixels]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = clips.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (d, h, w) = (first.frames.len(), first.height, first.width);
    let mut cv = Vec::with_capacity(clips.len() * 3 * d * h * w);
    let mut kv = Vec::with_capacity(clips.len() * 3 * h * w);
    for c in clips {
        if c.frames.len() != d || c.height != h || c.width != w {
            return Err(Error::shape("batch_inputs", "clips in a batch must share D, H and W"));
        }
        cv.extend(c.clip_values().into_iter().map(|v| T::of(v as f64)));
        kv.extend(c.key().iter().map(|&v| T::of(v as f64)));
    }
    let n = clips.len();
    Ok((Tensor::new(&[n, 3, d, h, w], cv)?, Tensor::new(&[n, 3, h, w], kv)?))
}

/// Raw head outputs for the given key frames, evaluated in batches of `batch`.
pub fn raw_grids<T: Real>(
    model: &Detector<T>,
    video: &AnnotatedVideo,
    keys: &[usize],
    clip: &ClipSpec,
    source: Features3d<'_, T>,
    batch: usize,
) -> Result<Vec<RawGrid>> {
    if clip.clip_len != model.clip_len() {
        return Err(Error::Config(format!(
            "clip length {} does not match the model's {}",
            clip.clip_len,
            model.clip_len()
        )));
    }
    let mut out = Vec::with_capacity(keys.len());
    no_grad(|| -> Result<()> {
        for chunk in keys.chunks(batch.max(1)) {
            let px = chunk.iter().map(|&k| ClipPixels::from_video(video, k, clip)).collect::<Result<Vec<_>>>()?;
            let (clips, frames) = batch_inputs::<T>(&px)?;
            let raw = match source {
                Features3d::Live => model.forward(&clips, &frames, Mode::Eval)?,
                Features3d::Bank { bank, window } => {
                    let f2d = model.features_2d(&frames, Mode::Eval)?;
                    let f3d = if model.ablation().uses_3d() {
                        let q: Vec<Tensor<T>> = chunk.iter().map(|&k| bank.query(k, window).tensor).collect();
                        let stacked = Tensor::concat(&q, 0)?;
                        let s = bank.feature_shape();
                        Some(stacked.reshape(&[chunk.len(), s[0], s[1], s[2]])?)
                    } else {
                        None
                    };
                    model.forward_features(f2d.as_ref(), f3d.as_ref(), Mode::Eval)?
                }
            };
            for i in 0..chunk.len() {
                out.push(RawGrid::from_batch(&raw, i, model.anchors().len(), model.num_classes())?);
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// Key frames admitted by the clip's padding rule.
pub fn key_frames(video: &AnnotatedVideo, clip: &ClipSpec) -> Vec<usize> {
    (0..video.num_frames()).filter(|&t| clip.admits(t)).collect()
}

/// Decoded, confidence-filtered and suppressed detections for every admitted key frame.
pub fn detect_video<T: Real>(
    model: &Detector<T>,
    video: &AnnotatedVideo,
    clip: &ClipSpec,
    nms: &NmsConfig,
    source: Features3d<'_, T>,
    batch: usize,
) -> Result<Vec<DetectionRecord>> {
    let keys = key_frames(video, clip);
    let grids = raw_grids(model, video, &keys, clip, source, batch)?;
    let mut out = Vec::new();
    for (&k, g) in keys.iter().zip(&grids) {
        let dets = decode(g, model.anchors(), model.spec.class_mode, k)?;
        out.extend(postprocess(dets, model.num_classes(), nms).into_iter().map(|d| DetectionRecord {
            video: video.id.clone(),
            frame: k,
            class: d.class,
            score: d.score,
            bbox: d.detection.bbox,
        }));
    }
    Ok(out)
}

/// Per-frame ground truth of `videos`, restricted to frames the clip rule admits.
pub fn ground_truth(videos: &[AnnotatedVideo], clip: &ClipSpec) -> Vec<GroundTruth> {
    let mut out = Vec::new();
    for v in videos {
        for t in key_frames(v, clip) {
            out.extend(v.annotations[t].iter().map(|b| GroundTruth {
                video: v.id.clone(),
                frame: t,
                class: b.class,
                bbox: b.bbox,
            }));
        }
    }
    out
}

/// One ground-truth tube per video and class over the admitted frames.
pub fn ground_truth_tubes(videos: &[AnnotatedVideo], clip: &ClipSpec) -> Vec<VideoTube> {
    let mut out = Vec::new();
    for v in videos {
        let mut by_class: BTreeMap<usize, Vec<TubeEntry>> = BTreeMap::new();
        for t in key_frames(v, clip) {
            for b in &v.annotations[t] {
                by_class.entry(b.class).or_default().push(TubeEntry {
                    frame: t,
                    bbox: b.bbox,
                    score: 1.0,
                });
            }
        }
        out.extend(by_class.into_iter().map(|(class, entries)| VideoTube {
            video: v.id.clone(),
            tube: ActionTube { class, entries },
        }));
    }
    out
}

/// Links the detections of each video and class into tubes.
///
/// Output is ordered by video id, then class, then the linker's order.
pub fn link_detections(dets: &[DetectionRecord], num_classes: usize, cfg: &LinkConfig) -> Result<Vec<VideoTube>> {
    let mut by_video: BTreeMap<&str, Vec<&DetectionRecord>> = BTreeMap::new();
    for d in dets {
        if d.class >= num_classes {
            return Err(Error::invalid(format!(
                "detection in {} frame {} has class {} but only {num_classes} classes exist",
                d.video, d.frame, d.class
            )));
        }
        by_video.entry(&d.video).or_default().push(d);
    }
    let mut out = Vec::new();
    for (video, ds) in by_video {
        let len = ds.iter().map(|d| d.frame + 1).max().unwrap_or(0);
        for c in 0..num_classes {
            let mut frames: Vec<Vec<Detection>> = vec![Vec::new(); len];
            for d in ds.iter().filter(|d| d.class == c) {
                let mut scores = vec![0.0; num_classes];
                scores[c] = 1.0;
                frames[d.frame].push(Detection {
                    frame: d.frame,
                    bbox: d.bbox,
                    confidence: d.score,
                    class_scores: scores,
                });
            }
            if frames.iter().all(Vec::is_empty) {
                continue;
            }
            out.extend(viterbi_link(&frames, c, cfg)?.into_iter().map(|tube| VideoTube {
                video: video.to_string(),
                tube,
            }));
        }
    }
    Ok(out)
}
