//! Inference throughput: frames per second of the full detector path.

use std::fmt;
use std::time::Instant;

use rand::Rng;

use crate::data::stream_rng;
use crate::error::Result;
use crate::head::{decode, RawGrid};
use crate::model::Detector;
use crate::nn::Mode;
use crate::postprocess::{postprocess, NmsConfig};
use crate::tensor::{no_grad, Real, Tensor};

const BENCH_DOMAIN: u64 = 0x4245_4e43;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub clip_len: usize,
    pub clips: usize,
    pub seconds: f64,
    /// `clip_len · clips / seconds`.
    pub fps: f64,
    pub latency_ms: f64,
}

impl fmt::Display for BenchResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "clip_len {} clips {} seconds {:.4} fps {:.1} latency_ms {:.3}",
            self.clip_len, self.clips, self.seconds, self.fps, self.latency_ms
        )
    }
}

/// Times `clips` single-clip passes (forward, decode, suppression) after `warmup` untimed ones.
pub fn bench_detector<T: Real>(model: &Detector<T>, height: usize, width: usize, clips: usize, warmup: usize, nms: &NmsConfig) -> Result<BenchResult> {
    let d = model.clip_len();
    let mut rng = stream_rng(0, BENCH_DOMAIN, d as u64);
    let clip: Vec<T> = (0..3 * d * height * width).map(|_| T::of(rng.gen::<f64>())).collect();
    let clip = Tensor::new(&[1, 3, d, height, width], clip)?;
    let key = clip.narrow(2, d - 1, 1)?.reshape(&[1, 3, height, width])?;
    let once = || -> Result<usize> {
        no_grad(|| {
            let raw = model.forward(&clip, &key, Mode::Eval)?;
            let grid = RawGrid::from_batch(&raw, 0, model.anchors().len(), model.num_classes())?;
            let dets = decode(&grid, model.anchors(), model.spec.class_mode, 0)?;
            Ok(postprocess(dets, model.num_classes(), nms).len())
        })
    };
    for _ in 0..warmup {
        once()?;
    }
    let start = Instant::now();
    for _ in 0..clips {
        once()?;
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(BenchResult {
        clip_len: d,
        clips,
        seconds,
        fps: (d * clips) as f64 / seconds,
        latency_ms: 1e3 * seconds / clips as f64,
    })
}
