//! Versioned text files passed between the detect, link and eval stages.

use std::fmt::Write as _;
use std::path::Path;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::linker::{ActionTube, TubeEntry};
use crate::metrics::{DetectionRecord, VideoTube};

pub const DETECTIONS_HEADER: &str = "# actloc detections v1";
pub const TUBES_HEADER: &str = "# actloc tubes v1";

/// One `video_id frame class score x y w h` line per detection.
pub fn write_detections(dets: &[DetectionRecord]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{DETECTIONS_HEADER}");
    let _ = writeln!(s, "# video_id frame class score x y w h");
    for d in dets {
        let b = d.bbox;
        let _ = writeln!(s, "{} {} {} {} {} {} {} {}", d.video, d.frame, d.class, d.score, b.x, b.y, b.w, b.h);
    }
    s
}

/// One `tube video_id frame class score x y w h` line per tube box.
pub fn write_tubes(tubes: &[VideoTube]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{TUBES_HEADER}");
    let _ = writeln!(s, "# tube video_id frame class score x y w h");
    for (i, t) in tubes.iter().enumerate() {
        for e in &t.tube.entries {
            let b = e.bbox;
            let _ = writeln!(s, "{i} {} {} {} {} {} {} {} {}", t.video, e.frame, t.tube.class, e.score, b.x, b.y, b.w, b.h);
        }
    }
    s
}

struct Fields<'a> {
    f: Vec<&'a str>,
    line: usize,
    origin: &'a Path,
}

impl Fields<'_> {
    fn err(&self, msg: String) -> Error {
        Error::Parse {
            path: self.origin.to_path_buf(),
            line: self.line,
            msg,
        }
    }

    fn int(&self, k: usize, name: &str) -> Result<usize> {
        self.f[k].parse().map_err(|_| self.err(format!("bad {name} {:?}", self.f[k])))
    }

    fn real(&self, k: usize, name: &str) -> Result<f64> {
        self.f[k]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| self.err(format!("bad {name} {:?}", self.f[k])))
    }

    fn bbox(&self, k: usize) -> Result<BBox> {
        Ok(BBox::new(self.real(k, "x")?, self.real(k + 1, "y")?, self.real(k + 2, "w")?, self.real(k + 3, "h")?))
    }
}

fn records<'a>(text: &'a str, header: &str, width: usize, origin: &'a Path) -> Result<Vec<Fields<'a>>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == header => {}
        _ => {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: 1,
                msg: format!("missing header {header:?}"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f = Fields {
            f: line.split_whitespace().collect(),
            line: i + 1,
            origin,
        };
        if f.f.len() != width {
            return Err(f.err(format!("expected {width} fields, got {}", f.f.len())));
        }
        out.push(f);
    }
    Ok(out)
}

pub fn parse_detections(text: &str, origin: &Path) -> Result<Vec<DetectionRecord>> {
    records(text, DETECTIONS_HEADER, 8, origin)?
        .iter()
        .map(|f| {
            Ok(DetectionRecord {
                video: f.f[0].to_string(),
                frame: f.int(1, "frame")?,
                class: f.int(2, "class")?,
                score: f.real(3, "score")?,
                bbox: f.bbox(4)?,
            })
        })
        .collect()
}

/// Tubes in order of first appearance of their index; lines of one tube must be frame-increasing.
pub fn parse_tubes(text: &str, origin: &Path) -> Result<Vec<VideoTube>> {
    let mut out: Vec<VideoTube> = Vec::new();
    let mut ids: Vec<usize> = Vec::new();
    for f in records(text, TUBES_HEADER, 9, origin)? {
        let id = f.int(0, "tube index")?;
        let (video, class) = (f.f[1], f.int(3, "class")?);
        let entry = TubeEntry {
            frame: f.int(2, "frame")?,
            bbox: f.bbox(5)?,
            score: f.real(4, "score")?,
        };
        match ids.iter().position(|&i| i == id) {
            Some(k) => {
                let t = &mut out[k];
                if t.video != video || t.tube.class != class {
                    return Err(f.err(format!("tube {id} changes video or class")));
                }
                if t.tube.last_frame().is_some_and(|l| entry.frame <= l) {
                    return Err(f.err(format!("tube {id} frames must increase")));
                }
                t.tube.entries.push(entry);
            }
            None => {
                ids.push(id);
                out.push(VideoTube {
                    video: video.to_string(),
                    tube: ActionTube {
                        class,
                        entries: vec![entry],
                    },
                });
            }
        }
    }
    Ok(out)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub fn save_detections(dets: &[DetectionRecord], path: &Path) -> Result<()> {
    write_file(path, &write_detections(dets))
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    parse_detections(&read_file(path)?, path)
}

pub fn save_tubes(tubes: &[VideoTube], path: &Path) -> Result<()> {
    write_file(path, &write_tubes(tubes))
}

pub fn load_tubes(path: &Path) -> Result<Vec<VideoTube>> {
    parse_tubes(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(video: &str, frame: usize, score: f64) -> DetectionRecord {
        DetectionRecord {
            video: video.into(),
            frame,
            class: 2,
            score,
            bbox: BBox::new(0.1, 0.2 + 1e-13, 1.0 / 3.0, 0.4),
        }
    }

    #[test]
    fn detections_round_trip_exactly() {
        let d = vec![det("a", 0, 0.9), det("b", 7, 1.0 / 7.0)];
        let text = write_detections(&d);
        assert_eq!(parse_detections(&text, Path::new("d")).unwrap(), d);
        assert_eq!(write_detections(&parse_detections(&text, Path::new("d")).unwrap()), text);
    }

    #[test]
    fn tubes_round_trip() {
        let entry = |frame, score| TubeEntry {
            frame,
            bbox: BBox::new(0.1, 0.1, 0.2, 0.2),
            score,
        };
        let t = vec![
            VideoTube {
                video: "v".into(),
                tube: ActionTube {
                    class: 1,
                    entries: vec![entry(3, 0.5), entry(4, 0.25)],
                },
            },
            VideoTube {
                video: "v".into(),
                tube: ActionTube {
                    class: 1,
                    entries: vec![entry(3, 0.125)],
                },
            },
        ];
        assert_eq!(parse_tubes(&write_tubes(&t), Path::new("t")).unwrap(), t);
    }

    #[test]
    fn errors_name_the_line() {
        let text = format!("{DETECTIONS_HEADER}\na 0 1 0.5 0.1 0.1 0.2\n");
        match parse_detections(&text, Path::new("d")).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
        assert!(parse_detections("a 0 1 0.5 0.1 0.1 0.2 0.2\n", Path::new("d")).is_err());
    }
}
