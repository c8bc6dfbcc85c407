use rand::Rng;

use super::{join, Parameterized, Visitor};
use crate::error::Result;
use crate::tensor::{ConvGeometry, Real, Tensor};

/// Kaiming-uniform (fan-in, ReLU gain) initial weights.
fn kaiming_uniform<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Vec<T> {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..shape.iter().product::<usize>())
        .map(|_| T::of(rng.gen_range(-bound..bound)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Conv2d<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geometry: ConvGeometry,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [cout, cin, kernel, kernel];
        Self {
            weight: Tensor::param(&shape, kaiming_uniform(&shape, rng)).expect("conv weight shape"),
            bias: bias.then(|| Tensor::zeros(&[cout]).into_param()),
            geometry: ConvGeometry::new_2d(kernel, stride, padding),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `[N×Cin×H×W] -> [N×Cout×H'×W']`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv(&self.weight, self.bias.as_ref(), self.geometry)
    }
}

impl<T: Real> Parameterized<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        v.param(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            v.param(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv3d<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geometry: ConvGeometry,
}

impl<T: Real> Conv3d<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [cout, cin, kernel[0], kernel[1], kernel[2]];
        Self {
            weight: Tensor::param(&shape, kaiming_uniform(&shape, rng)).expect("conv weight shape"),
            bias: bias.then(|| Tensor::zeros(&[cout]).into_param()),
            geometry: ConvGeometry::new_3d(kernel, stride, padding),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `[N×Cin×D×H×W] -> [N×Cout×D'×H'×W']`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv(&self.weight, self.bias.as_ref(), self.geometry)
    }
}

impl<T: Real> Parameterized<T> for Conv3d<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        v.param(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            v.param(&join(prefix, "bias"), b);
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn conv2d_with(weight: &[f64], shape: [usize; 4], stride: usize, pad: usize) -> Conv2d<f64> {
        Conv2d {
            weight: Tensor::from_f64(&shape, weight).unwrap(),
            bias: None,
            geometry: ConvGeometry::new_2d(shape[2], stride, pad),
        }
    }

    #[test]
    fn pointwise_scaling() {
        let conv = conv2d_with(&[2.0], [1, 1, 1, 1], 1, 0);
        let x = Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(conv.forward(&x).unwrap().values(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn padded_ones_kernel_on_ones() {
        let conv = conv2d_with(&[1.0; 9], [1, 1, 3, 3], 1, 1);
        let y = conv.forward(&Tensor::ones(&[1, 1, 2, 2])).unwrap();
        assert_eq!(y.values(), &[4.0; 4]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let conv = conv2d_with(&[0.0; 18], [1, 2, 3, 3], 1, 1);
        let y = conv.forward(&Tensor::full(&[2, 2, 5, 5], 3.0)).unwrap();
        assert!(y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_size_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::<f64>::new(3, 4, 3, 2, 1, true, &mut rng);
        let y = conv.forward(&Tensor::zeros(&[1, 3, 9, 8])).unwrap();
        // floor((9 + 2 - 3)/2) + 1 = 5, floor((8 + 2 - 3)/2) + 1 = 4
        assert_eq!(y.shape(), &[1, 4, 5, 4]);
        assert!(conv.forward(&Tensor::zeros(&[1, 2, 9, 8])).is_err());
    }

    #[test]
    fn identity_3d_kernel() {
        let conv = Conv3d {
            weight: Tensor::<f64>::ones(&[1, 1, 1, 1, 1]),
            bias: None,
            geometry: ConvGeometry::new_3d([1, 1, 1], [1, 1, 1], [0, 0, 0]),
        };
        let vals: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = Tensor::from_f64(&[1, 1, 2, 3, 4], &vals).unwrap();
        assert_eq!(conv.forward(&x).unwrap().values(), x.values());
    }

    #[test]
    fn depth_averaging_kernel_gives_temporal_mean() {
        let depth = 4;
        let conv = Conv3d {
            weight: Tensor::<f64>::full(&[1, 1, depth, 1, 1], 1.0 / depth as f64),
            bias: None,
            geometry: ConvGeometry::new_3d([depth, 1, 1], [1, 1, 1], [0, 0, 0]),
        };
        // frame t is constant (t + 1) in space
        let mut vals = Vec::new();
        for t in 0..depth {
            vals.extend(std::iter::repeat_n((t + 1) as f64, 9));
        }
        let x = Tensor::from_f64(&[1, 1, depth, 3, 3], &vals).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 3, 3]);
        assert!(y.values().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let conv = Conv2d::<f64>::new(4, 8, 3, 1, 1, true, &mut rng);
        let bound = (6.0f64 / 36.0).sqrt();
        assert!(conv.weight.values().iter().all(|w| w.abs() <= bound));
        assert!(conv.bias.unwrap().values().iter().all(|&b| b == 0.0));
    }
}
