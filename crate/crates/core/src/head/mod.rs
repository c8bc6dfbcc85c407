//! Anchor priors, the final projection, box decoding and target assignment.

mod anchors;
mod grid;

pub use anchors::{kmeans_anchors, kmeans_from, kmeans_objective, AnchorSet};
pub use grid::{
    build_targets, class_scores, decode, softmax, Assignment, ClassMode, Detection, FrameTargets, LabeledBox, RawGrid,
    CLASS0, TCONF, TH, TW, TX, TY,
};
pub(crate) use grid::sigmoid;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Parameterized, Visitor};
use crate::tensor::{Real, Tensor};

/// `1×1` convolution from the fused map to `k·(5 + NumCls)` raw channels.
#[derive(Debug, Clone)]
pub struct Head<T: Real> {
    conv: Conv2d<T>,
    pub num_anchors: usize,
    pub num_classes: usize,
}

impl<T: Real> Head<T> {
    pub fn new(in_channels: usize, num_anchors: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(in_channels, num_anchors * (5 + num_classes), 1, 1, 0, true, rng),
            num_anchors,
            num_classes,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.num_anchors * (5 + self.num_classes)
    }

    /// `[N×C*×H'×W'] -> [N×k(5+NumCls)×H'×W']`, no activation.
    pub fn head_project(&self, d: &Tensor<T>) -> Result<Tensor<T>> {
        match d.shape() {
            &[_, c, _, _] if c == self.conv.in_channels() => self.conv.forward(d),
            s => Err(Error::shape(
                "head_project",
                format!("expected [N,{},H,W], got {s:?}", self.conv.in_channels()),
            )),
        }
    }
}

impl<T: Real> Parameterized<T> for Head<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.conv.visit(prefix, v);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn projection_channel_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = Head::<f32>::new(32, 5, 24, &mut rng);
        assert_eq!(h.out_channels(), 145);
        let h = Head::<f32>::new(32, 5, 4, &mut rng);
        let y = h.head_project(&Tensor::zeros(&[1, 32, 7, 7])).unwrap();
        assert_eq!(y.shape(), &[1, 45, 7, 7]);
        assert!(h.head_project(&Tensor::zeros(&[1, 16, 7, 7])).is_err());
    }
}
