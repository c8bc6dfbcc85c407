use std::fmt::Write as _;
use std::path::Path;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::head::LabeledBox;

/// One line per box: `frame_index class_id x y w h`.
pub fn write_annotations(per_frame: &[Vec<LabeledBox>]) -> String {
    let mut s = String::new();
    for (t, boxes) in per_frame.iter().enumerate() {
        for b in boxes {
            let r = b.bbox;
            let _ = writeln!(s, "{t} {} {} {} {} {}", b.class, r.x, r.y, r.w, r.h);
        }
    }
    s
}

/// Inverse of [`write_annotations`]; frames without lines are empty.
pub fn parse_annotations(text: &str, num_frames: usize, origin: &Path) -> Result<Vec<Vec<LabeledBox>>> {
    let mut out = vec![Vec::new(); num_frames];
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(err(format!("expected 6 fields \"frame class x y w h\", got {}", f.len())));
        }
        let frame: usize = f[0].parse().map_err(|_| err(format!("bad frame index {:?}", f[0])))?;
        let class: usize = f[1].parse().map_err(|_| err(format!("bad class id {:?}", f[1])))?;
        let mut v = [0.0f64; 4];
        for (k, name) in ["x", "y", "w", "h"].iter().enumerate() {
            v[k] = f[2 + k]
                .parse()
                .ok()
                .filter(|x: &f64| x.is_finite())
                .ok_or_else(|| err(format!("bad coordinate {name}={:?}", f[2 + k])))?;
        }
        if frame >= num_frames {
            return Err(err(format!("frame {frame} out of range for {num_frames} frames")));
        }
        out[frame].push(LabeledBox {
            bbox: BBox::new(v[0], v[1], v[2], v[3]),
            class,
        });
    }
    Ok(out)
}

pub fn save_annotations(per_frame: &[Vec<LabeledBox>], path: &Path) -> Result<()> {
    std::fs::write(path, write_annotations(per_frame)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_annotations(path: &Path, num_frames: usize) -> Result<Vec<Vec<LabeledBox>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_annotations(&text, num_frames, path)
}
