//! Gram-matrix channel attention on a random fused feature map.
//!
//! `cargo run --example cfam_attention`

use actloc::cfam::{attend, attention_map, gram};
use actloc::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> actloc::Result<()> {
    let (c, h, w) = (6, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let values: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b = Tensor::<f64>::from_f64(&[c, h, w], &values)?;

    let f = b.reshape(&[c, h * w])?;
    let g = gram(&f)?;
    let m = attention_map(&g)?;
    println!("attention map (rows sum to one):");
    for row in m.m.values().chunks(c) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("  [{}]  sum {:.6}", cells.join(" "), row.iter().sum::<f64>());
    }

    for alpha in [0.0, 0.5, 1.0] {
        let out = attend(&b, &Tensor::scalar(alpha))?;
        let shift = out.values().iter().zip(b.values()).map(|(o, i)| (o - i).abs()).fold(0.0, f64::max);
        println!("alpha {alpha}: output shape {:?}, max change from input {shift:.4}", out.shape());
    }
    Ok(())
}
