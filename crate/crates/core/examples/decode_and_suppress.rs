//! Regression targets for two boxes, decoded back from a raw grid and suppressed.
//!
//! `cargo run --example decode_and_suppress`

use actloc::head::{build_targets, decode, AnchorSet, ClassMode, LabeledBox, RawGrid, CLASS0, TCONF};
use actloc::postprocess::{postprocess, NmsConfig};
use actloc::BBox;

fn main() -> actloc::Result<()> {
    let anchors = AnchorSet::new(vec![(1.0, 1.0), (2.5, 2.5)])?;
    let (grid, classes) = (8, 3);
    let gts = [
        LabeledBox { bbox: BBox::new(0.10, 0.20, 0.12, 0.12), class: 1 },
        LabeledBox { bbox: BBox::new(0.50, 0.40, 0.30, 0.32), class: 2 },
    ];
    let targets = build_targets(&gts, &anchors, (grid, grid))?;

    // a confident, correct prediction at every responsible slot and nothing elsewhere
    let mut raw = RawGrid::new(vec![0.0; anchors.len() * (5 + classes) * grid * grid], anchors.len(), classes, grid, grid)?;
    for a in 0..anchors.len() {
        for y in 0..grid {
            for x in 0..grid {
                raw.set(a, TCONF, y, x, -8.0);
            }
        }
    }
    for t in &targets.assignments {
        let (x, y) = t.cell;
        for (ch, v) in t.raw_targets().into_iter().enumerate() {
            raw.set(t.anchor, ch, y, x, v);
        }
        raw.set(t.anchor, TCONF, y, x, 8.0);
        raw.set(t.anchor, CLASS0 + t.class, y, x, 6.0);
        println!("gt {} -> anchor {} cell {:?}", t.gt, t.anchor, t.cell);
    }

    let dets = decode(&raw, &anchors, ClassMode::Single, 0)?;
    println!("{} slots decoded", dets.len());
    for d in postprocess(dets, classes, &NmsConfig::default()) {
        let b = d.detection.bbox;
        println!("class {} score {:.3} box ({:.3}, {:.3}, {:.3}, {:.3})", d.class, d.score, b.x, b.y, b.w, b.h);
    }
    Ok(())
}
