//! Frame-level average precision on a hand-sized example.
//!
//! `cargo run --example frame_map`

use actloc::metrics::{frame_map, DetectionRecord, GroundTruth};
use actloc::BBox;

fn main() {
    let gt = |frame, x| GroundTruth { video: "v".into(), frame, class: 0, bbox: BBox::new(x, 0.2, 0.2, 0.2) };
    let det = |frame, x, score| DetectionRecord { video: "v".into(), frame, class: 0, score, bbox: BBox::new(x, 0.2, 0.2, 0.2) };
    let gts = vec![gt(0, 0.1), gt(1, 0.1), gt(2, 0.1)];
    // ranked: hit, miss, hit, hit
    let dets = vec![det(0, 0.1, 0.9), det(1, 0.7, 0.8), det(1, 0.11, 0.7), det(2, 0.1, 0.6)];
    let report = frame_map(&dets, &gts, 0.5, 1);
    print!("{report}");
    print!("{}", report.to_records());
}
