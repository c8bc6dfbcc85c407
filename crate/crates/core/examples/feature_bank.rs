//! Long-term feature bank: per-clip 3-D features averaged around each key frame.
//!
//! `cargo run --example feature_bank`

use actloc::config::RunConfig;
use actloc::data::{synth_generate, SynthConfig};
use actloc::head::AnchorSet;
use actloc::inference::{detect_video, Features3d};
use actloc::lfb::build_bank;

fn main() -> actloc::Result<()> {
    let cfg = RunConfig::desk();
    let ds = synth_generate(&SynthConfig {
        train_per_class: 0,
        test_per_class: 1,
        ..cfg.data.synth.clone()
    })?;
    let video = &ds.videos[0];
    let model = cfg.build_detector::<f32>(AnchorSet::default_for_grid(video.height / cfg.backbone.stride), ds.num_classes())?;
    let bank = build_bank(video, model.backbone3d.as_ref().expect("full model has a 3-D branch"))?;
    println!("{}: {} frames -> {} clips of {}, feature shape {:?}", video.id, video.num_frames(), bank.len(), bank.clip_len, bank.feature_shape());
    for key in [0, 17, video.num_frames() - 1] {
        println!("key {key:>2}: window 8 averages clips {:?}", bank.selection(key, 8));
    }
    let live = detect_video(&model, video, &cfg.data.clip, &cfg.nms, Features3d::Live, cfg.eval_batch)?;
    let banked = detect_video(&model, video, &cfg.data.clip, &cfg.nms, Features3d::Bank { bank: &bank, window: 8 }, cfg.eval_batch)?;
    println!("untrained detector: {} detections live, {} with the bank", live.len(), banked.len());
    let dir = std::env::temp_dir().join("actloc_feature_bank_example");
    bank.save(&dir)?;
    println!("bank written to {}", dir.display());
    Ok(())
}
