use std::sync::Mutex;

use super::{join, Mode, Parameterized, Visitor};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
struct Running {
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Per-channel batch normalization with running statistics.
///
/// Running statistics sit behind a mutex so that evaluation-mode forward
/// passes can share the layer across threads; only training updates them.
#[derive(Debug)]
pub struct BatchNorm<T: Real> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    running: Mutex<Running>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> Clone for BatchNorm<T> {
    fn clone(&self) -> Self {
        Self {
            scale: self.scale.clone(),
            shift: self.shift.clone(),
            running: Mutex::new(self.running.lock().expect("running stats").clone()),
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Tensor::ones(&[channels]).into_param(),
            shift: Tensor::zeros(&[channels]).into_param(),
            running: Mutex::new(Running {
                mean: vec![0.0; channels],
                var: vec![1.0; channels],
            }),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn running_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let r = self.running.lock().expect("running stats");
        (r.mean.clone(), r.var.clone())
    }

    pub fn set_running_stats(&mut self, mean: Vec<f64>, var: Vec<f64>) {
        let r = self.running.get_mut().expect("running stats");
        r.mean = mean;
        r.var = var;
    }

    /// Train mode normalizes by batch statistics and folds them into the
    /// running estimates; eval mode uses the running estimates only.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => {
                if x.shape().first().copied().unwrap_or(0) < 2 {
                    return Err(Error::invalid(format!(
                        "batch norm in train mode needs batch size >= 2, got shape {:?}",
                        x.shape()
                    )));
                }
                let (y, stats) = x.batch_norm_train(&self.scale, &self.shift, self.eps)?;
                let m = self.momentum;
                let unbias = stats.count as f64 / (stats.count as f64 - 1.0).max(1.0);
                let mut r = self.running.lock().expect("running stats");
                for c in 0..stats.mean.len() {
                    r.mean[c] = (1.0 - m) * r.mean[c] + m * stats.mean[c];
                    r.var[c] = (1.0 - m) * r.var[c] + m * stats.var[c] * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let r = self.running.lock().expect("running stats");
                x.batch_norm_eval(&self.scale, &self.shift, &r.mean, &r.var, self.eps)
            }
        }
    }
}

impl<T: Real> Parameterized<T> for BatchNorm<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        v.param(&join(prefix, "scale"), &mut self.scale);
        v.param(&join(prefix, "shift"), &mut self.shift);
        let r = self.running.get_mut().expect("running stats");
        v.buffer(&join(prefix, "running_mean"), &mut r.mean);
        v.buffer(&join(prefix, "running_var"), &mut r.var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let bn = BatchNorm::<f64>::new(2);
        let x = Tensor::from_f64(&[1, 2, 2], &[0.5, -1.0, 2.0, 3.0]).unwrap();
        let y = bn.forward(&x, Mode::Eval).unwrap();
        for (a, b) in y.values().iter().zip(x.values()) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn constant_batch_maps_to_shift() {
        let mut bn = BatchNorm::<f64>::new(1);
        bn.shift = Tensor::from_f64(&[1], &[0.7]).unwrap();
        let y = bn.forward(&Tensor::full(&[4, 1, 3, 3], 2.5), Mode::Train).unwrap();
        assert!(y.values().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn train_output_statistics_follow_scale_and_shift() {
        let mut bn = BatchNorm::<f64>::new(2);
        bn.scale = Tensor::from_f64(&[2], &[1.5, 0.5]).unwrap();
        bn.shift = Tensor::from_f64(&[2], &[-1.0, 2.0]).unwrap();
        let vals: Vec<f64> = (0..4 * 2 * 9).map(|i| ((i * 37 % 23) as f64).sin() * 3.0 + i as f64 * 0.01).collect();
        let y = bn.forward(&Tensor::from_f64(&[4, 2, 3, 3], &vals).unwrap(), Mode::Train).unwrap();
        for c in 0..2 {
            let xs: Vec<f64> = (0..4)
                .flat_map(|n| y.values()[(n * 2 + c) * 9..(n * 2 + c + 1) * 9].to_vec())
                .collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let std = (xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
            assert!((mean - [-1.0, 2.0][c]).abs() < 1e-9);
            assert!((std - [1.5, 0.5][c]).abs() < 1e-4);
        }
    }

    #[test]
    fn train_mode_rejects_single_sample() {
        let bn = BatchNorm::<f64>::new(1);
        assert!(bn.forward(&Tensor::ones(&[1, 1, 4, 4]), Mode::Train).is_err());
    }

    #[test]
    fn running_stats_track_batches() {
        let bn = BatchNorm::<f64>::new(1);
        for _ in 0..200 {
            let x = Tensor::from_f64(&[2, 1, 1], &[3.0, 5.0]).unwrap();
            bn.forward(&x, Mode::Train).unwrap();
        }
        let (mean, var) = bn.running_stats();
        assert!((mean[0] - 4.0).abs() < 1e-6);
        // unbiased variance of {3, 5}
        assert!((var[0] - 2.0).abs() < 1e-6);
    }
}
