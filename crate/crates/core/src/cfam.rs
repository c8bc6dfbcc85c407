//! Channel fusion with Gram-matrix channel attention.
//!
//! The two branch features are stacked along channels, mixed by two conv
//! blocks, reweighted by a row-softmaxed channel Gram matrix with a learnable
//! residual gate, then mixed again by two more conv blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ThreeDFeature, TwoDFeature};
use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm, Conv2d, Mode, Parameterized, Visitor};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfamConfig {
    /// Channels of the attention path (C).
    pub channels: usize,
    /// Output channels (C*).
    pub out_channels: usize,
}

impl Default for CfamConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            out_channels: 32,
        }
    }
}

/// Stacks `[3-D channels, 2-D channels]` into one `[(C'+C'')×H'×W']` tensor.
pub fn fuse_concat<T: Real>(f2d: &TwoDFeature<T>, f3d: &ThreeDFeature<T>) -> Result<Tensor<T>> {
    let (a, b) = (f3d.tensor.shape(), f2d.tensor.shape());
    if a.len() != 3 || b.len() != 3 || a[1..] != b[1..] {
        return Err(Error::shape("fuse_concat", format!("grids differ: 3d {a:?}, 2d {b:?}")));
    }
    Tensor::concat(&[f3d.tensor.clone(), f2d.tensor.clone()], 0)
}

/// Batched variant of [`fuse_concat`] over `[N×C×H'×W']` maps.
pub fn fuse_batch<T: Real>(f2d: &Tensor<T>, f3d: &Tensor<T>) -> Result<Tensor<T>> {
    let (a, b) = (f3d.shape(), f2d.shape());
    if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2..] != b[2..] {
        return Err(Error::shape("fuse_batch", format!("grids differ: 3d {a:?}, 2d {b:?}")));
    }
    Tensor::concat(&[f3d.clone(), f2d.clone()], 1)
}

/// `F·Fᵀ` for `F: [C×N]`.
pub fn gram<T: Real>(f: &Tensor<T>) -> Result<Tensor<T>> {
    f.matmul(&f.t()?)
}

/// Row-stochastic `[C×C]` channel attention.
#[derive(Debug, Clone)]
pub struct AttentionMap<T: Real> {
    pub m: Tensor<T>,
}

pub fn attention_map<T: Real>(g: &Tensor<T>) -> Result<AttentionMap<T>> {
    match g.shape() {
        &[r, c] if r == c => Ok(AttentionMap { m: g.softmax_rows()? }),
        s => Err(Error::shape("attention_map", format!("expected a square matrix, got {s:?}"))),
    }
}

/// `alpha·reshape(M·F) + B` where `F` is `B: [C×H'×W']` flattened row-major.
pub fn apply_attention<T: Real>(
    m: &AttentionMap<T>,
    f: &Tensor<T>,
    b: &Tensor<T>,
    alpha: &Tensor<T>,
) -> Result<Tensor<T>> {
    let bs = b.shape();
    if bs.len() != 3 || f.shape() != [bs[0], bs[1] * bs[2]] || m.m.shape() != [bs[0], bs[0]] {
        return Err(Error::shape(
            "apply_attention",
            format!("M {:?}, F {:?}, B {:?}", m.m.shape(), f.shape(), bs),
        ));
    }
    if alpha.numel() != 1 {
        return Err(Error::shape("apply_attention", format!("alpha must be a scalar, got {:?}", alpha.shape())));
    }
    let attended = m.m.matmul(f)?.reshape(bs)?;
    attended.mul(alpha)?.add(b)
}

/// The attention stage on one map `B: [C×H'×W']`.
pub fn attend<T: Real>(b: &Tensor<T>, alpha: &Tensor<T>) -> Result<Tensor<T>> {
    let s = b.shape();
    if s.len() != 3 {
        return Err(Error::shape("attend", format!("expected [C,H,W], got {s:?}")));
    }
    let f = b.reshape(&[s[0], s[1] * s[2]])?;
    let m = attention_map(&gram(&f)?)?;
    apply_attention(&m, &f, b, alpha)
}

#[derive(Debug, Clone)]
struct ConvBlock<T: Real> {
    conv: Conv2d<T>,
    norm: BatchNorm<T>,
}

impl<T: Real> ConvBlock<T> {
    fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, 3, 1, 1, false, rng),
            norm: BatchNorm::new(cout),
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.norm.forward(&self.conv.forward(x)?, mode)?.relu())
    }

    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.conv.visit(&join(prefix, "conv"), v);
        self.norm.visit(&join(prefix, "norm"), v);
    }
}

/// Fusion module parameters: two input blocks, the residual gate, two output blocks.
#[derive(Debug, Clone)]
pub struct Cfam<T: Real> {
    conv_in: [ConvBlock<T>; 2],
    pub alpha: Tensor<T>,
    conv_out: [ConvBlock<T>; 2],
}

impl<T: Real> Cfam<T> {
    pub fn new(in_channels: usize, cfg: &CfamConfig, rng: &mut impl Rng) -> Result<Self> {
        if in_channels == 0 || cfg.channels == 0 || cfg.out_channels == 0 {
            return Err(Error::Config("fusion channel counts must be positive".into()));
        }
        Ok(Self {
            conv_in: [
                ConvBlock::new(in_channels, cfg.channels, rng),
                ConvBlock::new(cfg.channels, cfg.channels, rng),
            ],
            alpha: Tensor::zeros(&[1]).into_param(),
            conv_out: [
                ConvBlock::new(cfg.channels, cfg.out_channels, rng),
                ConvBlock::new(cfg.out_channels, cfg.out_channels, rng),
            ],
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv_in[0].conv.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv_out[1].conv.out_channels()
    }

    /// `[N×(C'+C'')×H'×W'] -> [N×C*×H'×W']`; `attention = false` skips the gated stage.
    pub fn forward(&self, a: &Tensor<T>, mode: Mode, attention: bool) -> Result<Tensor<T>> {
        match a.shape() {
            &[_, c, _, _] if c == self.in_channels() => {}
            s => {
                return Err(Error::shape(
                    "cfam",
                    format!("expected [N,{},H,W], got {s:?}", self.in_channels()),
                ))
            }
        }
        let mut x = a.clone();
        for b in &self.conv_in {
            x = b.forward(&x, mode)?;
        }
        if attention {
            let n = x.shape()[0];
            let mut parts = Vec::with_capacity(n);
            for i in 0..n {
                let s = x.narrow(0, i, 1)?;
                let inner = s.shape()[1..].to_vec();
                let y = attend(&s.reshape(&inner)?, &self.alpha)?;
                parts.push(y.reshape(s.shape())?);
            }
            x = if n == 1 { parts.pop().expect("one part") } else { Tensor::concat(&parts, 0)? };
        }
        for b in &self.conv_out {
            x = b.forward(&x, mode)?;
        }
        Ok(x)
    }

    /// One fused map `[(C'+C'')×H'×W'] -> [C*×H'×W']` in evaluation mode.
    pub fn cfam_forward(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let s = a.shape();
        if s.len() != 3 {
            return Err(Error::shape("cfam_forward", format!("expected [C,H,W], got {s:?}")));
        }
        let y = self.forward(&a.reshape(&[1, s[0], s[1], s[2]])?, Mode::Eval, true)?;
        let out = y.shape()[1..].to_vec();
        y.reshape(&out)
    }
}

impl<T: Real> Parameterized<T> for Cfam<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        for (i, b) in self.conv_in.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("conv_in{i}")), v);
        }
        v.param(&join(prefix, "alpha"), &mut self.alpha);
        for (i, b) in self.conv_out.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("conv_out{i}")), v);
        }
    }
}
