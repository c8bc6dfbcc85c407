use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};

use super::{load_annotations, save_annotations, AnnotatedVideo, Dataset, Split};
use crate::error::{Error, Result};

const MANIFEST_HEADER: &str = "# actloc manifest v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub class: usize,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
}

/// Text index of a dataset directory: one `video_id split class num_frames height width` line per video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn of(ds: &Dataset) -> Self {
        Self {
            class_names: ds.class_names.clone(),
            entries: ds
                .videos
                .iter()
                .map(|v| ManifestEntry {
                    id: v.id.clone(),
                    split: v.split,
                    class: v.class,
                    num_frames: v.num_frames(),
                    height: v.height,
                    width: v.width,
                })
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MANIFEST_HEADER}");
        let _ = writeln!(s, "# classes {}", self.class_names.join(" "));
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{} {} {} {} {} {}",
                e.id,
                e.split.as_str(),
                e.class,
                e.num_frames,
                e.height,
                e.width
            );
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MANIFEST_HEADER => {}
            _ => return Err(err(1, format!("missing header {MANIFEST_HEADER:?}"))),
        }
        let mut class_names = None;
        let mut entries = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# classes") {
                class_names = Some(rest.split_whitespace().map(str::to_string).collect::<Vec<_>>());
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(err(i + 1, format!("expected 6 fields, got {}", f.len())));
            }
            let num = |k: usize, name: &str| f[k].parse::<usize>().map_err(|_| err(i + 1, format!("bad {name} {:?}", f[k])));
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                split: Split::parse(f[1]).ok_or_else(|| err(i + 1, format!("bad split {:?}", f[1])))?,
                class: num(2, "class")?,
                num_frames: num(3, "frame count")?,
                height: num(4, "height")?,
                width: num(5, "width")?,
            });
        }
        let class_names = class_names.ok_or_else(|| err(2, "missing \"# classes\" line".into()))?;
        if let Some(e) = entries.iter().find(|e| e.class >= class_names.len()) {
            return Err(err(0, format!("video {} has class {} but only {} classes exist", e.id, e.class, class_names.len())));
        }
        Ok(Self { class_names, entries })
    }
}

fn frame_path(dir: &Path, id: &str, t: usize) -> PathBuf {
    dir.join("frames").join(id).join(format!("{t:04}.png"))
}

fn annotation_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("annotations").join(format!("{id}.txt"))
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(format!("creating {}", p.display()), e))
}

pub(crate) fn planar_to_image(frame: &[u8], h: usize, w: usize) -> RgbImage {
    let hw = h * w;
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([frame[i], frame[hw + i], frame[2 * hw + i]])
    })
}

/// Writes `manifest.txt`, `frames/<id>/<t>.png` and `annotations/<id>.txt`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    mkdir(&dir.join("annotations"))?;
    for v in &ds.videos {
        v.validate()?;
        let fdir = dir.join("frames").join(&v.id);
        mkdir(&fdir)?;
        for (t, f) in v.frames.iter().enumerate() {
            let p = frame_path(dir, &v.id, t);
            planar_to_image(f, v.height, v.width).save(&p).map_err(|e| Error::Image {
                path: p.clone(),
                msg: e.to_string(),
            })?;
        }
        save_annotations(&v.annotations, &annotation_path(dir, &v.id))?;
    }
    let m = dir.join("manifest.txt");
    std::fs::write(&m, Manifest::of(ds).to_text()).map_err(|e| Error::io(format!("writing {}", m.display()), e))
}

fn load_video(dir: &Path, e: &ManifestEntry) -> Result<AnnotatedVideo> {
    let mut frames = Vec::with_capacity(e.num_frames);
    for t in 0..e.num_frames {
        let p = frame_path(dir, &e.id, t);
        let img = image::open(&p)
            .map_err(|err| Error::Image {
                path: p.clone(),
                msg: err.to_string(),
            })?
            .to_rgb8();
        if img.width() as usize != e.width || img.height() as usize != e.height {
            return Err(Error::Image {
                path: p,
                msg: format!("size {}x{} differs from the manifest's {}x{}", img.width(), img.height(), e.width, e.height),
            });
        }
        let hw = e.height * e.width;
        let mut planar = vec![0u8; 3 * hw];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                planar[c * hw + i] = px[c];
            }
        }
        frames.push(planar);
    }
    let v = AnnotatedVideo {
        id: e.id.clone(),
        split: e.split,
        class: e.class,
        height: e.height,
        width: e.width,
        frames,
        annotations: load_annotations(&annotation_path(dir, &e.id), e.num_frames)?,
    };
    v.validate()?;
    Ok(v)
}

/// Reads a directory written by [`save_dataset`], optionally one split only.
pub fn load_dataset(dir: &Path, split: Option<Split>) -> Result<Dataset> {
    let mp = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(format!("reading {}", mp.display()), e))?;
    let manifest = Manifest::parse(&text, &mp)?;
    let videos = manifest
        .entries
        .iter()
        .filter(|e| split.is_none_or(|s| s == e.split))
        .map(|e| load_video(dir, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        class_names: manifest.class_names,
        videos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    #[test]
    fn disk_round_trip() {
        let ds = synth_generate(&SynthConfig {
            train_per_class: 1,
            test_per_class: 1,
            frames: 3,
            height: 16,
            width: 16,
            size_min: 0.3,
            size_max: 0.4,
            ..SynthConfig::default()
        })
        .unwrap();
        let dir = std::env::temp_dir().join(format!("actloc-store-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        save_dataset(&ds, &dir).unwrap();
        let back = load_dataset(&dir, None).unwrap();
        assert_eq!(back, ds);
        let test = load_dataset(&dir, Some(Split::Test)).unwrap();
        assert_eq!(test.videos.len(), 4);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn manifest_errors_are_located() {
        let bad = format!("{MANIFEST_HEADER}\n# classes a b\nv train 5 3 8 8\n");
        assert!(Manifest::parse(&bad, Path::new("m")).is_err());
        let bad = format!("{MANIFEST_HEADER}\n# classes a b\nv valid 0 3 8 8\n");
        match Manifest::parse(&bad, Path::new("m")).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
    }
}
