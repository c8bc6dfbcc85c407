//! Viterbi linking of per-frame detections into action tubes.
//!
//! `cargo run --example tube_linking`

use actloc::head::Detection;
use actloc::linker::{viterbi_link, LinkConfig};
use actloc::metrics::tube_iou;
use actloc::BBox;

fn main() -> actloc::Result<()> {
    // two actors drifting apart plus one spurious box in frame 3
    let frames: Vec<Vec<Detection>> = (0..6)
        .map(|t| {
            let s = t as f64 * 0.04;
            let mut f = vec![
                Detection { frame: t, bbox: BBox::new(0.10 + s, 0.20, 0.20, 0.30), confidence: 0.9, class_scores: vec![0.8, 0.2] },
                Detection { frame: t, bbox: BBox::new(0.60, 0.50 - s, 0.25, 0.25), confidence: 0.7, class_scores: vec![0.7, 0.3] },
            ];
            if t == 3 {
                f.push(Detection { frame: t, bbox: BBox::new(0.05, 0.75, 0.10, 0.10), confidence: 0.4, class_scores: vec![0.9, 0.1] });
            }
            f
        })
        .collect();
    let tubes = viterbi_link(&frames, 0, &LinkConfig::default())?;
    for (i, t) in tubes.iter().enumerate() {
        println!(
            "tube {i}: frames {:?}..={:?}, {} boxes, score {:.3}, gap-free {}",
            t.first_frame(),
            t.last_frame(),
            t.len(),
            t.score(),
            t.is_gap_free()
        );
    }
    println!("spatiotemporal IoU of the first two tubes: {:.3}", tube_iou(&tubes[0], &tubes[1]));
    Ok(())
}
