//! Generates a small synthetic motion dataset and writes it in the on-disk format.
//!
//! `cargo run --example synth_dataset -- [out_dir]`

use std::path::PathBuf;

use actloc::data::{load_dataset, save_dataset, synth_generate, Split, SynthConfig};

fn main() -> actloc::Result<()> {
    let dir = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("actloc_synth_example"), PathBuf::from);
    let cfg = SynthConfig {
        train_per_class: 2,
        test_per_class: 1,
        ..SynthConfig::default()
    };
    let ds = synth_generate(&cfg)?;
    save_dataset(&ds, &dir)?;
    let back = load_dataset(&dir, None)?;
    assert_eq!(back, ds);
    for v in &ds.videos {
        let (a, b) = (v.annotations[0][0].bbox.center(), v.annotations[v.num_frames() - 1][0].bbox.center());
        println!(
            "{:<16} {:<5} {} frames, centre ({:.2}, {:.2}) -> ({:.2}, {:.2})",
            v.id,
            v.split.as_str(),
            v.num_frames(),
            a.0,
            a.1,
            b.0,
            b.1
        );
    }
    println!("train boxes per class {:?}", ds.class_counts(Split::Train));
    println!("written to {}", dir.display());
    Ok(())
}
