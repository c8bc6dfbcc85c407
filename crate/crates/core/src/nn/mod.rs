//! Convolution and normalization layers over [`Tensor`](crate::Tensor).

mod batchnorm;
mod conv;

pub use batchnorm::BatchNorm;
pub use conv::{Conv2d, Conv3d};

use crate::tensor::{Real, Tensor};

/// Whether normalization layers use batch statistics (and update running ones).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Receives the named parameters and state buffers of a module tree.
pub trait Visitor<T: Real> {
    fn param(&mut self, name: &str, tensor: &mut Tensor<T>);
    fn buffer(&mut self, _name: &str, _values: &mut Vec<f64>) {}
}

/// A module whose parameters can be enumerated in a fixed order.
pub trait Parameterized<T: Real> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>);

    fn num_params(&mut self) -> usize {
        struct Count(usize);
        impl<T: Real> Visitor<T> for Count {
            fn param(&mut self, _: &str, t: &mut Tensor<T>) {
                self.0 += t.numel();
            }
        }
        let mut c = Count(0);
        self.visit("", &mut c);
        c.0
    }

    /// Snapshot of every parameter as `(name, values)`.
    fn param_values(&mut self) -> Vec<(String, Vec<f64>)> {
        struct Collect(Vec<(String, Vec<f64>)>);
        impl<T: Real> Visitor<T> for Collect {
            fn param(&mut self, name: &str, t: &mut Tensor<T>) {
                self.0.push((name.to_string(), t.to_f64_vec()));
            }
        }
        let mut c = Collect(Vec::new());
        self.visit("", &mut c);
        c.0
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
