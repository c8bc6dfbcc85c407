//! Reverse-mode gradients of a small expression, checked against central differences.
//!
//! `cargo run --example autodiff_gradcheck`

use actloc::tensor::grad_check;
use actloc::Tensor;

fn main() -> actloc::Result<()> {
    let x = Tensor::<f64>::param(&[2, 3], vec![0.3, -1.2, 0.8, 2.0, -0.4, 0.1])?;
    let w = Tensor::<f64>::from_f64(&[3, 2], &[0.5, -0.2, 0.1, 0.9, -0.7, 0.3])?;

    // sum(softmax(sigmoid(x)·w)²)
    let f = |x: &Tensor<f64>| x.sigmoid().matmul(&w)?.softmax_rows().map(|s| s.square().sum());
    let y = f(&x)?;
    y.backward()?;
    println!("f(x) = {:.6}", y.item());
    println!("df/dx = {:?}", x.grad().expect("x is a parameter"));

    let report = grad_check(f, &x, 1e-5, None)?;
    println!(
        "finite differences over {} coordinates: max relative error {:.2e}, max absolute error {:.2e}",
        report.checked, report.max_rel_error, report.max_abs_error
    );
    Ok(())
}
