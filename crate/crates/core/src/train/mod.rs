//! Joint optimization of both branches, fusion and head.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointEntry, EntryKind};

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment, stream_rng, AnnotatedVideo, AugmentConfig, AugmentDraw, ClipPixels, ClipSpec, Dataset, Split};
use crate::error::{Error, Result};
use crate::head::{build_targets, FrameTargets, LabeledBox};
use crate::inference::batch_inputs;
use crate::loss::{balance_weights, detection_loss, LossConfig, LossReport};
use crate::model::{Ablation, Detector};
use crate::nn::{Mode, Parameterized, Visitor};
use crate::tensor::{Real, Tensor};

const EPOCH_DOMAIN: u64 = 0x4550_4f43;
const AUGMENT_DOMAIN: u64 = 0x4155_474d;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of `max_iters` after which the rate is multiplied by `lr_factor`.
    pub milestones: Vec<f64>,
    pub lr_factor: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub freeze_3d: bool,
    pub ablation: Ablation,
    pub seed: u64,
    /// Iterations between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Iterations between held-out evaluations; 0 disables them.
    pub eval_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![0.5, 0.66, 0.83, 0.92],
            lr_factor: 0.5,
            batch_size: 8,
            max_iters: 3000,
            freeze_3d: false,
            ablation: Ablation::Full,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    /// Settings tuned for the synthetic dataset on a single CPU core.
    pub fn desk() -> Self {
        Self {
            lr: 0.02,
            max_iters: 4000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 for batch statistics".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and weight decay be non-negative".into()));
        }
        if self.milestones.windows(2).any(|w| w[1] <= w[0]) || self.milestones.iter().any(|&m| !(0.0..=1.0).contains(&m)) {
            return Err(Error::Config(format!(
                "milestones must be increasing fractions in [0, 1], got {:?}",
                self.milestones
            )));
        }
        Ok(())
    }

    /// Milestones as absolute iteration counts.
    pub fn milestone_iters(&self) -> Vec<usize> {
        self.milestones.iter().map(|&m| (m * self.max_iters as f64).round() as usize).collect()
    }
}

/// `lr · factor^(milestones passed)`; a milestone at `m` is passed from iteration `m` on.
pub fn lr_at(iteration: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.milestone_iters().into_iter().filter(|&m| iteration >= m).count();
    cfg.lr * cfg.lr_factor.powi(passed as i32)
}

/// Momentum SGD: `v ← μv − lr·(g + wd·θ)`, `θ ← θ + v`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sgd {
    pub velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    /// Updates every parameter of `model` not matched by `frozen`; parameters
    /// absent from the graph are treated as having zero gradient.
    pub fn step<T: Real>(
        &mut self,
        model: &mut impl Parameterized<T>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        frozen: &dyn Fn(&str) -> bool,
    ) {
        struct Update<'a> {
            velocity: &'a mut BTreeMap<String, Vec<f64>>,
            lr: f64,
            momentum: f64,
            weight_decay: f64,
            frozen: &'a dyn Fn(&str) -> bool,
        }
        impl<T: Real> Visitor<T> for Update<'_> {
            fn param(&mut self, name: &str, t: &mut Tensor<T>) {
                if (self.frozen)(name) {
                    return;
                }
                let g = t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()]);
                let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; t.numel()]);
                let data = t
                    .values()
                    .iter()
                    .zip(&g)
                    .zip(v.iter_mut())
                    .map(|((&p, &g), v)| {
                        let p = p.f64();
                        *v = self.momentum * *v - self.lr * (g.f64() + self.weight_decay * p);
                        T::of(p + *v)
                    })
                    .collect();
                *t = Tensor::param(t.shape(), data).expect("shape unchanged");
            }
        }
        model.visit(
            "",
            &mut Update {
                velocity: &mut self.velocity,
                lr,
                momentum,
                weight_decay,
                frozen,
            },
        );
    }
}

/// One mini-batch ready for the detector.
#[derive(Debug, Clone)]
pub struct Batch<T: Real> {
    pub clips: Tensor<T>,
    pub keys: Tensor<T>,
    pub targets: Vec<FrameTargets>,
}

/// Training examples of one split: every admitted key frame of every video.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub videos: Vec<&'a AnnotatedVideo>,
    pub samples: Vec<(usize, usize)>,
    pub mirror: Vec<usize>,
    pub class_weights: Vec<f64>,
}

impl<'a> TrainData<'a> {
    pub fn new(ds: &'a Dataset, clip: &ClipSpec) -> Result<Self> {
        let videos: Vec<&AnnotatedVideo> = ds.split(Split::Train).collect();
        let samples: Vec<(usize, usize)> = videos
            .iter()
            .enumerate()
            .flat_map(|(i, v)| (0..v.num_frames()).filter(|&t| clip.admits(t)).map(move |t| (i, t)))
            .collect();
        if samples.is_empty() {
            return Err(Error::invalid("training split has no usable key frames"));
        }
        let mut counts = vec![0usize; ds.num_classes()];
        for &(i, t) in &samples {
            for b in &videos[i].annotations[t] {
                if let Some(c) = counts.get_mut(b.class) {
                    *c += 1;
                }
            }
        }
        Ok(Self {
            videos,
            samples,
            mirror: ds.mirror_map(),
            class_weights: balance_weights(&counts)?,
        })
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        (self.samples.len() / batch_size).max(1)
    }

    /// Sample indices of iteration `it`: epochs are seeded permutations, the last partial batch dropped.
    pub fn batch_indices(&self, it: usize, batch_size: usize, seed: u64) -> Vec<usize> {
        let bpe = self.batches_per_epoch(batch_size);
        let (epoch, pos) = (it / bpe, it % bpe);
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut stream_rng(seed, EPOCH_DOMAIN, epoch as u64));
        order.into_iter().cycle().skip(pos * batch_size).take(batch_size).collect()
    }

    /// Augmented batch for iteration `it`.
    pub fn batch<T: Real>(
        &self,
        it: usize,
        cfg: &TrainConfig,
        clip: &ClipSpec,
        aug: &AugmentConfig,
        model: &Detector<T>,
    ) -> Result<Batch<T>> {
        let mut rng = stream_rng(cfg.seed, AUGMENT_DOMAIN, it as u64);
        let mut pixels = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for s in self.batch_indices(it, cfg.batch_size, cfg.seed) {
            let (vi, key) = self.samples[s];
            let video = self.videos[vi];
            let px = ClipPixels::from_video(video, key, clip)?;
            let draw = AugmentDraw::sample(aug, &mut rng);
            let (px, boxes): (ClipPixels, Vec<LabeledBox>) = augment(&px, &video.annotations[key], &draw, &self.mirror, aug.min_area);
            let stride = model.spec.backbone.stride;
            targets.push(build_targets(&boxes, model.anchors(), (px.height / stride, px.width / stride))?);
            pixels.push(px);
        }
        let (clips, keys) = batch_inputs(&pixels)?;
        Ok(Batch { clips, keys, targets })
    }
}

/// Forward, loss, backward and one optimizer step.
pub fn train_step<T: Real>(
    model: &mut Detector<T>,
    opt: &mut Sgd,
    batch: &Batch<T>,
    class_weights: &[f64],
    cfg: &TrainConfig,
    loss: &LossConfig,
    lr: f64,
) -> Result<LossReport> {
    let raw = model.forward(&batch.clips, &batch.keys, Mode::Train).map_err(|e| match e {
        Error::Domain { op, detail } => Error::NonFiniteLoss {
            iteration: 0,
            report: format!("forward pass failed in {op}: {detail}"),
        },
        e => e,
    })?;
    let (total, report) = detection_loss(&raw, &batch.targets, model.anchors(), model.num_classes(), class_weights, loss)?;
    if !report.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: 0,
            report: report.to_string(),
        });
    }
    total.backward()?;
    let freeze = cfg.freeze_3d;
    opt.step(model, lr, cfg.momentum, cfg.weight_decay, &|name| freeze && Detector::<T>::is_3d_param(name));
    Ok(report)
}

/// One training-log record.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossReport,
}

impl LogRecord {
    pub const CSV_HEADER: &'static str = "iteration,lr,l_x,l_y,l_w,l_h,l_conf,l_d,l_cls,l_final";
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.iteration, self.lr, self.loss.csv_row())
    }
}

/// Model, optimizer state and iteration counter.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real> {
    pub model: Detector<T>,
    pub opt: Sgd,
    pub iteration: usize,
    pub cfg: TrainConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub clip: ClipSpec,
}

impl<T: Real> Trainer<T> {
    pub fn new(mut model: Detector<T>, cfg: TrainConfig, loss: LossConfig, augment: AugmentConfig, clip: ClipSpec) -> Result<Self> {
        cfg.validate()?;
        clip.validate()?;
        if clip.clip_len != model.clip_len() {
            return Err(Error::Config(format!(
                "clip length {} does not match the 3-D branch's {}",
                clip.clip_len,
                model.clip_len()
            )));
        }
        if cfg.ablation != model.ablation() {
            return Err(Error::Config(format!(
                "trainer ablation {} does not match the model's {}",
                cfg.ablation,
                model.ablation()
            )));
        }
        if cfg.freeze_3d {
            if let Some(b) = model.backbone3d.as_mut() {
                b.freeze();
            }
        }
        Ok(Self {
            model,
            opt: Sgd::default(),
            iteration: 0,
            cfg,
            loss,
            augment,
            clip,
        })
    }

    /// Runs iteration `self.iteration` and advances the counter.
    pub fn step(&mut self, data: &TrainData<'_>) -> Result<LogRecord> {
        let it = self.iteration;
        let lr = lr_at(it, &self.cfg);
        let batch = data.batch(it, &self.cfg, &self.clip, &self.augment, &self.model)?;
        let loss = train_step(&mut self.model, &mut self.opt, &batch, &data.class_weights, &self.cfg, &self.loss, lr).map_err(|e| match e {
            Error::NonFiniteLoss { report, .. } => Error::NonFiniteLoss { iteration: it, report },
            e => e,
        })?;
        self.iteration += 1;
        Ok(LogRecord { iteration: it, lr, loss })
    }

    /// Trains until `max_iters`, calling `hook` after every step.
    pub fn fit(&mut self, data: &TrainData<'_>, hook: &mut dyn FnMut(&mut Self, &LogRecord) -> Result<()>) -> Result<()> {
        while self.iteration < self.cfg.max_iters {
            let rec = self.step(data)?;
            hook(self, &rec)?;
        }
        Ok(())
    }
}
