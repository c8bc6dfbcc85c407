use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Per-channel batch statistics (biased variance) from a training-mode pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

struct Layout {
    batch: usize,
    channels: usize,
    spatial: usize,
}

impl Layout {
    fn of<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Self> {
        if x.ndim() < 2 {
            return Err(Error::shape("batch_norm", format!("input {:?} lacks a channel axis", x.shape())));
        }
        let channels = x.shape()[1];
        if gamma.shape() != [channels] || beta.shape() != [channels] {
            return Err(Error::shape(
                "batch_norm",
                format!("scale {:?} / shift {:?} for {channels} channels", gamma.shape(), beta.shape()),
            ));
        }
        Ok(Self {
            batch: x.shape()[0],
            channels,
            spatial: x.shape()[2..].iter().product(),
        })
    }

    /// Calls `f(channel, flat index)` for every element.
    fn each(&self, mut f: impl FnMut(usize, usize)) {
        for n in 0..self.batch {
            for c in 0..self.channels {
                let base = (n * self.channels + c) * self.spatial;
                for i in base..base + self.spatial {
                    f(c, i);
                }
            }
        }
    }
}

impl<T: Real> Tensor<T> {
    /// Normalizes each channel by its batch statistics, then scales and shifts.
    pub fn batch_norm_train(&self, gamma: &Self, beta: &Self, eps: f64) -> Result<(Self, BatchStats)> {
        let l = Layout::of(self, gamma, beta)?;
        let m = l.batch * l.spatial;
        let x = self.values();
        let mut mean = vec![0.0f64; l.channels];
        l.each(|c, i| mean[c] += x[i].f64());
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0f64; l.channels];
        l.each(|c, i| {
            let d = x[i].f64() - mean[c];
            var[c] += d * d;
        });
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&v| T::of(v)).collect();

        let (g, b) = (gamma.values(), beta.values());
        let mut out = vec![T::zero(); x.len()];
        l.each(|c, i| out[i] = g[c] * (x[i] - mean_t[c]) * inv_std[c] + b[c]);

        let layout = Layout { ..l };
        let stats = BatchStats { mean, var, count: m };
        let y = Tensor::from_op(
            "batch_norm_train",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |_, dy, parents| {
                let (x, gamma, beta) = (&parents[0], &parents[1], &parents[2]);
                let xv = x.values();
                let ch = layout.channels;
                let mut sum_dy = vec![T::zero(); ch];
                let mut sum_dy_xhat = vec![T::zero(); ch];
                layout.each(|c, i| {
                    let xhat = (xv[i] - mean_t[c]) * inv_std[c];
                    sum_dy[c] += dy[i];
                    sum_dy_xhat[c] += dy[i] * xhat;
                });
                let gx = x.requires_grad().then(|| {
                    let mf = T::of(m as f64);
                    let g = gamma.values();
                    let mut gx = vec![T::zero(); xv.len()];
                    layout.each(|c, i| {
                        let xhat = (xv[i] - mean_t[c]) * inv_std[c];
                        gx[i] = g[c] * inv_std[c] / mf * (mf * dy[i] - sum_dy[c] - xhat * sum_dy_xhat[c]);
                    });
                    gx
                });
                vec![
                    gx,
                    gamma.requires_grad().then(|| sum_dy_xhat.clone()),
                    beta.requires_grad().then(|| sum_dy.clone()),
                ]
            }),
        );
        Ok((y, stats))
    }

    /// Normalizes with fixed statistics (evaluation mode).
    pub fn batch_norm_eval(&self, gamma: &Self, beta: &Self, mean: &[f64], var: &[f64], eps: f64) -> Result<Self> {
        let l = Layout::of(self, gamma, beta)?;
        if mean.len() != l.channels || var.len() != l.channels {
            return Err(Error::shape("batch_norm", "running statistics length"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&v| T::of(v)).collect();
        let x = self.values();
        let (g, b) = (gamma.values(), beta.values());
        let mut out = vec![T::zero(); x.len()];
        l.each(|c, i| out[i] = g[c] * (x[i] - mean_t[c]) * inv_std[c] + b[c]);
        let layout = Layout { ..l };
        Ok(Tensor::from_op(
            "batch_norm_eval",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |_, dy, parents| {
                let (x, gamma, beta) = (&parents[0], &parents[1], &parents[2]);
                let xv = x.values();
                let g = gamma.values();
                let ch = layout.channels;
                let mut sum_dy = vec![T::zero(); ch];
                let mut sum_dy_xhat = vec![T::zero(); ch];
                let mut gx = vec![T::zero(); xv.len()];
                layout.each(|c, i| {
                    sum_dy[c] += dy[i];
                    sum_dy_xhat[c] += dy[i] * (xv[i] - mean_t[c]) * inv_std[c];
                    gx[i] = dy[i] * g[c] * inv_std[c];
                });
                vec![
                    x.requires_grad().then_some(gx),
                    gamma.requires_grad().then_some(sum_dy_xhat),
                    beta.requires_grad().then_some(sum_dy),
                ]
            }),
        ))
    }
}
