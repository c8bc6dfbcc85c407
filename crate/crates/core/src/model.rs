//! The two-branch detector and its ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone2d, Backbone3d, BackboneConfig};
use crate::cfam::{fuse_batch, Cfam, CfamConfig};
use crate::error::{Error, Result};
use crate::head::{AnchorSet, ClassMode, Head};
use crate::nn::{join, Conv2d, Mode, Parameterized, Visitor};
use crate::tensor::{Real, Tensor};

/// Which branches feed the fusion stage and whether channel attention runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
    #[serde(rename = "concat")]
    Concat,
    #[serde(rename = "full")]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::TwoD, Ablation::ThreeD, Ablation::Concat, Ablation::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::TwoD => "2d",
            Ablation::ThreeD => "3d",
            Ablation::Concat => "concat",
            Ablation::Full => "full",
        }
    }

    pub fn uses_2d(self) -> bool {
        self != Ablation::ThreeD
    }

    pub fn uses_3d(self) -> bool {
        self != Ablation::TwoD
    }

    pub fn uses_attention(self) -> bool {
        self == Ablation::Full
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation {s:?}; expected 2d, 3d, concat or full")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub num_anchors: usize,
    /// Fixed anchors in grid units; fitted by k-means on the training boxes when absent.
    pub anchors: Option<Vec<(f64, f64)>>,
    pub class_mode: ClassMode,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_anchors: 5,
            anchors: None,
            class_mode: ClassMode::Single,
        }
    }
}

/// Everything needed to rebuild a detector's parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub cfam: CfamConfig,
    pub anchors: AnchorSet,
    pub num_classes: usize,
    pub class_mode: ClassMode,
    pub ablation: Ablation,
}

#[derive(Debug, Clone)]
pub struct Detector<T: Real> {
    pub spec: ModelSpec,
    pub backbone2d: Option<Backbone2d<T>>,
    pub backbone3d: Option<Backbone3d<T>>,
    projection: Option<Conv2d<T>>,
    pub cfam: Cfam<T>,
    pub head: Head<T>,
}

impl<T: Real> Detector<T> {
    pub fn new(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.backbone.validate()?;
        if spec.num_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        let a = spec.ablation;
        let backbone2d = if a.uses_2d() { Some(Backbone2d::new(&spec.backbone, rng)?) } else { None };
        let backbone3d = if a.uses_3d() { Some(Backbone3d::new(&spec.backbone, rng)?) } else { None };
        let fused = spec.backbone.out_2d + spec.backbone.out_3d;
        let projection = match a {
            Ablation::TwoD => Some(Conv2d::new(spec.backbone.out_2d, fused, 1, 1, 0, true, rng)),
            Ablation::ThreeD => Some(Conv2d::new(spec.backbone.out_3d, fused, 1, 1, 0, true, rng)),
            _ => None,
        };
        let cfam = Cfam::new(fused, &spec.cfam, rng)?;
        let head = Head::new(spec.cfam.out_channels, spec.anchors.len(), spec.num_classes, rng);
        Ok(Self {
            spec,
            backbone2d,
            backbone3d,
            projection,
            cfam,
            head,
        })
    }

    pub fn ablation(&self) -> Ablation {
        self.spec.ablation
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.spec.anchors
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn clip_len(&self) -> usize {
        self.spec.backbone.clip_len
    }

    /// `[N×3×H×W] -> [N×C''×H'×W']`.
    pub fn features_2d(&self, keys: &Tensor<T>, mode: Mode) -> Result<Option<Tensor<T>>> {
        self.backbone2d.as_ref().map(|b| b.forward(keys, mode)).transpose()
    }

    /// `[N×3×D×H×W] -> [N×C'×H'×W']`.
    pub fn features_3d(&self, clips: &Tensor<T>, mode: Mode) -> Result<Option<Tensor<T>>> {
        self.backbone3d
            .as_ref()
            .map(|b| b.forward(clips, if b.is_frozen() { Mode::Eval } else { mode }))
            .transpose()
    }

    /// Fusion and head from precomputed branch features; the branch the
    /// ablation does not use must be `None`.
    pub fn forward_features(&self, f2d: Option<&Tensor<T>>, f3d: Option<&Tensor<T>>, mode: Mode) -> Result<Tensor<T>> {
        let fused = match (self.ablation(), f2d, f3d) {
            (Ablation::TwoD, Some(a), None) | (Ablation::ThreeD, None, Some(a)) => {
                self.projection.as_ref().expect("single-branch variants project").forward(a)?
            }
            (Ablation::Concat | Ablation::Full, Some(a), Some(b)) => fuse_batch(a, b)?,
            (ab, a, b) => {
                return Err(Error::invalid(format!(
                    "ablation {ab} got 2d features: {}, 3d features: {}",
                    a.is_some(),
                    b.is_some()
                )))
            }
        };
        let d = self.cfam.forward(&fused, mode, self.ablation().uses_attention())?;
        self.head.head_project(&d)
    }

    /// Raw grid `[N×k(5+NumCls)×H'×W']` from clips `[N×3×D×H×W]` and key frames `[N×3×H×W]`.
    pub fn forward(&self, clips: &Tensor<T>, keys: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let f2d = self.features_2d(keys, mode)?;
        let f3d = self.features_3d(clips, mode)?;
        self.forward_features(f2d.as_ref(), f3d.as_ref(), mode)
    }

    /// Whether parameter `name` is held fixed when the 3-D branch is frozen.
    pub fn is_3d_param(name: &str) -> bool {
        name.starts_with("backbone3d.")
    }
}

impl<T: Real> Parameterized<T> for Detector<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        if let Some(b) = self.backbone2d.as_mut() {
            b.visit(&join(prefix, "backbone2d"), v);
        }
        if let Some(b) = self.backbone3d.as_mut() {
            b.visit(&join(prefix, "backbone3d"), v);
        }
        if let Some(p) = self.projection.as_mut() {
            p.visit(&join(prefix, "projection"), v);
        }
        self.cfam.visit(&join(prefix, "cfam"), v);
        self.head.visit(&join(prefix, "head"), v);
    }
}
