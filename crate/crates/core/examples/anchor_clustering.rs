//! Anchor shapes from k-means over training boxes with `1 − IoU` distance.
//!
//! `cargo run --example anchor_clustering -- [k]`

use actloc::config::RunConfig;
use actloc::data::{synth_generate, Split, SynthConfig};
use actloc::head::{kmeans_anchors, kmeans_objective};

fn main() -> actloc::Result<()> {
    let k: usize = std::env::args().nth(1).map_or(5, |s| s.parse().expect("k"));
    let ds = synth_generate(&SynthConfig {
        train_per_class: 20,
        test_per_class: 0,
        ..SynthConfig::default()
    })?;
    let grid = (ds.videos[0].width / RunConfig::desk().backbone.stride) as f64;
    let sizes: Vec<(f64, f64)> = ds
        .split(Split::Train)
        .flat_map(|v| v.annotations.iter().flatten())
        .map(|b| (b.bbox.w * grid, b.bbox.h * grid))
        .collect();
    let anchors = kmeans_anchors(&sizes, k, 0)?;
    println!("{} boxes in grid-cell units, k = {k}", sizes.len());
    print!("{}", anchors.to_text());
    println!("mean 1 - IoU to the nearest anchor: {:.4}", kmeans_objective(&sizes, anchors.sizes()));
    Ok(())
}
