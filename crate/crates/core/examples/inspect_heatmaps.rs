//! Branch activation heatmaps after a short training run, written as PNG overlays.
//!
//! `cargo run --example inspect_heatmaps -- [iterations]`

use actloc::config::RunConfig;
use actloc::data::{synth_generate, Split, SynthConfig};
use actloc::inspect::{branch_heatmaps, overlay};
use actloc::train::{TrainData, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iters = std::env::args().nth(1).map_or(100, |s| s.parse().expect("iteration count"));
    let mut cfg = RunConfig::desk();
    cfg.train.max_iters = iters;
    let ds = synth_generate(&SynthConfig {
        train_per_class: 10,
        test_per_class: 1,
        ..cfg.data.synth.clone()
    })?;
    let model = cfg.build_detector::<f32>(cfg.anchors_for(&ds)?, ds.num_classes())?;
    let data = TrainData::new(&ds, &cfg.data.clip)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.loss.clone(), cfg.data.augment.clone(), cfg.data.clip)?;
    trainer.fit(&data, &mut |_, _| Ok(()))?;

    let dir = std::env::temp_dir().join("actloc_heatmaps_example");
    std::fs::create_dir_all(&dir)?;
    let video = ds.split(Split::Test).next().expect("one test video per class");
    let key = video.num_frames() / 2;
    let (h2, h3) = branch_heatmaps(&trainer.model, video, key, &cfg.data.clip)?;
    for (tag, heat) in [("2d", h2), ("3d", h3)] {
        let Some(heat) = heat else { continue };
        let path = dir.join(format!("{}_{key:04}_{tag}.png", video.id));
        overlay(&video.frames[key], &heat, 0.5).save(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}
