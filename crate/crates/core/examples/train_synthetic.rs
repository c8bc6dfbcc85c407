//! Trains a detector on the synthetic motion dataset and reports held-out frame-mAP.
//!
//! `cargo run --example train_synthetic -- [iterations] [ablation]`

use std::time::Instant;

use actloc::config::RunConfig;
use actloc::data::{synth_generate, Split};
use actloc::inference::{detect_video, ground_truth, Features3d};
use actloc::metrics::frame_map;
use actloc::train::{TrainData, Trainer};

fn main() -> actloc::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::desk();
    if let Some(n) = args.next() {
        cfg.train.max_iters = n.parse().expect("iteration count");
    }
    if let Some(a) = args.next() {
        cfg.train.ablation = a.parse()?;
    }
    let ds = synth_generate(&cfg.data.synth)?;
    let anchors = cfg.anchors_for(&ds)?;
    println!("anchors {:?}", anchors.sizes());
    let model = cfg.build_detector::<f32>(anchors, ds.num_classes())?;
    let data = TrainData::new(&ds, &cfg.data.clip)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.loss.clone(), cfg.data.augment.clone(), cfg.data.clip)?;
    let start = Instant::now();
    let every = cfg.train.log_every.max(1);
    trainer.fit(&data, &mut |t, rec| {
        if rec.iteration % every == 0 || t.iteration == t.cfg.max_iters {
            println!("{:>6} {:>7.1}s lr {:.2e} {}", rec.iteration, start.elapsed().as_secs_f64(), rec.lr, rec.loss);
        }
        Ok(())
    })?;
    let test: Vec<_> = ds.split(Split::Test).cloned().collect();
    let mut dets = Vec::new();
    for v in &test {
        dets.extend(detect_video(&trainer.model, v, &cfg.data.clip, &cfg.nms, Features3d::Live, cfg.eval_batch)?);
    }
    print!("{}", frame_map(&dets, &ground_truth(&test, &cfg.data.clip), 0.5, ds.num_classes()));
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
