//! Run configuration: one TOML document with a section per component.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::cfam::CfamConfig;
use crate::data::{stream_rng, AugmentConfig, ClipSpec, Dataset, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::head::{kmeans_anchors, AnchorSet};
use crate::lfb::LfbConfig;
use crate::linker::LinkConfig;
use crate::loss::LossConfig;
use crate::model::{Detector, HeadConfig, ModelSpec};
use crate::postprocess::NmsConfig;
use crate::tensor::Real;
use crate::train::TrainConfig;

const INIT_DOMAIN: u64 = 0x494e_4954;

/// Floating-point width of tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl Precision {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single" => Some(Precision::Single),
            "double" => Some(Precision::Double),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synth: SynthConfig,
    pub clip: ClipSpec,
    pub augment: AugmentConfig,
}

/// Every tunable of a run. Missing keys take their defaults; unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub precision: Precision,
    /// Images scored per forward pass at inference.
    pub eval_batch: usize,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub cfam: CfamConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub nms: NmsConfig,
    pub link: LinkConfig,
    pub lfb: LfbConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            precision: Precision::Single,
            eval_batch: 16,
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            cfam: CfamConfig::default(),
            head: HeadConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            nms: NmsConfig::default(),
            link: LinkConfig::default(),
            lfb: LfbConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults with the trainer and loss presets for the synthetic dataset.
    pub fn desk() -> Self {
        Self {
            train: TrainConfig::desk(),
            loss: LossConfig {
                obj_scale: 5.0,
                ..LossConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.data.clip.validate()?;
        self.train.validate()?;
        self.nms.validate()?;
        self.link.validate()?;
        if self.data.clip.clip_len != self.backbone.clip_len {
            return Err(Error::Config(format!(
                "data.clip.clip_len = {} but backbone.clip_len = {}; set both (or use --clip-len)",
                self.data.clip.clip_len, self.backbone.clip_len
            )));
        }
        if self.head.num_anchors == 0 {
            return Err(Error::Config("head.num_anchors must be positive".into()));
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be positive".into()));
        }
        if self.lfb.window == 0 {
            return Err(Error::Config("lfb.window must be positive".into()));
        }
        Ok(())
    }

    /// Fixed anchors from the config, else k-means over the training boxes in grid units.
    pub fn anchors_for(&self, ds: &Dataset) -> Result<AnchorSet> {
        if let Some(a) = &self.head.anchors {
            return AnchorSet::new(a.clone());
        }
        let mut boxes = Vec::new();
        for v in ds.split(Split::Train) {
            let (gh, gw) = ((v.height / self.backbone.stride) as f64, (v.width / self.backbone.stride) as f64);
            boxes.extend(v.annotations.iter().flatten().filter(|b| b.bbox.w > 0.0 && b.bbox.h > 0.0).map(|b| (b.bbox.w * gw, b.bbox.h * gh)));
        }
        kmeans_anchors(&boxes, self.head.num_anchors, self.train.seed)
    }

    pub fn model_spec(&self, anchors: AnchorSet, num_classes: usize) -> ModelSpec {
        ModelSpec {
            backbone: self.backbone.clone(),
            cfam: self.cfam.clone(),
            anchors,
            num_classes,
            class_mode: self.head.class_mode,
            ablation: self.train.ablation,
        }
    }

    /// Freshly initialized detector, seeded by `train.seed`.
    pub fn build_detector<T: Real>(&self, anchors: AnchorSet, num_classes: usize) -> Result<Detector<T>> {
        Detector::new(self.model_spec(anchors, num_classes), &mut stream_rng(self.train.seed, INIT_DOMAIN, 0))
    }

    pub fn fingerprint(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Writes `config.toml` and `stamp.txt` (command, seed, version, config digest) into `dir`.
pub fn write_stamp(dir: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let c = dir.join("config.toml");
    std::fs::write(&c, cfg.to_toml()).map_err(|e| Error::io(format!("writing {}", c.display()), e))?;
    let mut s = String::new();
    let _ = writeln!(s, "command {command}");
    let _ = writeln!(s, "version {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "seed {}", cfg.train.seed);
    let _ = writeln!(s, "data_seed {}", cfg.data.synth.seed);
    let _ = writeln!(s, "config_sha256 {}", cfg.fingerprint());
    let _ = writeln!(s, "non_causal {}", cfg.lfb.enabled);
    let p = dir.join("stamp.txt");
    std::fs::write(&p, s).map_err(|e| Error::io(format!("writing {}", p.display()), e))
}
