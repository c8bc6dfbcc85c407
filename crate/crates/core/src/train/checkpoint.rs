use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::Sgd;
use crate::error::{Error, Result};
use crate::model::{Detector, ModelSpec};
use crate::nn::{Parameterized, Visitor};
use crate::tensor::{Real, Tensor};

const HEADER: &str = "# actloc checkpoint v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Param,
    Buffer,
    Velocity,
}

impl EntryKind {
    fn as_str(self) -> &'static str {
        match self {
            EntryKind::Param => "param",
            EntryKind::Buffer => "buffer",
            EntryKind::Velocity => "velocity",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [EntryKind::Param, EntryKind::Buffer, EntryKind::Velocity].into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub kind: EntryKind,
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parameters, normalization statistics, momentum buffers and the run configuration.
///
/// Layout: text header lines up to `data`, then every entry as little-endian
/// f64 in header order, then the configuration text.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub precision: String,
    pub iteration: usize,
    pub fingerprint: String,
    pub class_names: Vec<String>,
    pub anchors: Vec<(f64, f64)>,
    pub entries: Vec<CheckpointEntry>,
    pub config: String,
}

/// Digest of everything that determines the parameter layout.
pub fn fingerprint(spec: &ModelSpec) -> String {
    let digest = Sha256::digest(format!("{spec:?}").as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn capture<T: Real>(model: &mut Detector<T>, opt: &Sgd, iteration: usize, class_names: &[String], config: &str) -> Self {
        struct Grab(Vec<CheckpointEntry>);
        impl<T: Real> Visitor<T> for Grab {
            fn param(&mut self, name: &str, t: &mut Tensor<T>) {
                self.0.push(CheckpointEntry {
                    kind: EntryKind::Param,
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.to_f64_vec(),
                });
            }
            fn buffer(&mut self, name: &str, values: &mut Vec<f64>) {
                self.0.push(CheckpointEntry {
                    kind: EntryKind::Buffer,
                    name: name.to_string(),
                    shape: vec![values.len()],
                    data: values.clone(),
                });
            }
        }
        let mut g = Grab(Vec::new());
        model.visit("", &mut g);
        let mut entries = g.0;
        entries.extend(opt.velocity.iter().map(|(name, v)| CheckpointEntry {
            kind: EntryKind::Velocity,
            name: name.clone(),
            shape: vec![v.len()],
            data: v.clone(),
        }));
        Self {
            precision: T::NAME.to_string(),
            iteration,
            fingerprint: fingerprint(&model.spec),
            class_names: class_names.to_vec(),
            anchors: model.anchors().sizes().to_vec(),
            entries,
            config: config.to_string(),
        }
    }

    /// Loads parameters, statistics and optimizer state into a model built from the same configuration.
    pub fn restore<T: Real>(&self, model: &mut Detector<T>, opt: &mut Sgd) -> Result<()> {
        let fp = fingerprint(&model.spec);
        if fp != self.fingerprint {
            return Err(Error::Checkpoint(
                "checkpoint was written for a different model layout (backbone, fusion, anchors, classes or ablation); \
                 rebuild the model from the configuration stored in the checkpoint"
                    .into(),
            ));
        }
        struct Put<'a> {
            entries: &'a [CheckpointEntry],
            err: Option<Error>,
            seen: usize,
        }
        impl Put<'_> {
            fn find(&mut self, kind: EntryKind, name: &str, len: usize) -> Option<&CheckpointEntry> {
                let e = self.entries.iter().find(|e| e.kind == kind && e.name == name);
                match e {
                    Some(e) if e.data.len() == len => {
                        self.seen += 1;
                        Some(e)
                    }
                    Some(e) => {
                        self.err.get_or_insert(Error::Checkpoint(format!(
                            "{} {name} holds {} values, the model needs {len}",
                            kind.as_str(),
                            e.data.len()
                        )));
                        None
                    }
                    None => {
                        self.err.get_or_insert(Error::Checkpoint(format!("checkpoint lacks {} {name}", kind.as_str())));
                        None
                    }
                }
            }
        }
        impl<T: Real> Visitor<T> for Put<'_> {
            fn param(&mut self, name: &str, t: &mut Tensor<T>) {
                let shape = t.shape().to_vec();
                if let Some(e) = self.find(EntryKind::Param, name, t.numel()) {
                    *t = Tensor::param(&shape, e.data.iter().map(|&v| T::of(v)).collect()).expect("length checked");
                }
            }
            fn buffer(&mut self, name: &str, values: &mut Vec<f64>) {
                if let Some(e) = self.find(EntryKind::Buffer, name, values.len()) {
                    values.clone_from(&e.data);
                }
            }
        }
        let mut put = Put {
            entries: &self.entries,
            err: None,
            seen: 0,
        };
        model.visit("", &mut put);
        if let Some(e) = put.err {
            return Err(e);
        }
        let state: Vec<&CheckpointEntry> = self.entries.iter().filter(|e| e.kind != EntryKind::Velocity).collect();
        if put.seen != state.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors but the model uses {}",
                state.len(),
                put.seen
            )));
        }
        opt.velocity = self
            .entries
            .iter()
            .filter(|e| e.kind == EntryKind::Velocity)
            .map(|e| (e.name.clone(), e.data.clone()))
            .collect();
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = String::new();
        let _ = writeln!(h, "{HEADER}");
        let _ = writeln!(h, "precision {}", self.precision);
        let _ = writeln!(h, "iteration {}", self.iteration);
        let _ = writeln!(h, "fingerprint {}", self.fingerprint);
        let _ = writeln!(h, "classes {}", self.class_names.join(" "));
        let anchors: Vec<String> = self.anchors.iter().map(|(w, h)| format!("{w} {h}")).collect();
        let _ = writeln!(h, "anchors {}", anchors.join(" "));
        let _ = writeln!(h, "config_bytes {}", self.config.len());
        for e in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            let _ = writeln!(h, "entry {} {} {}", e.kind.as_str(), e.name, dims.join(" "));
        }
        let _ = writeln!(h, "data");
        let mut out = h.into_bytes();
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(self.config.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| err(lines.len() + 1, "header ends before the data marker".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| err(lines.len() + 1, "header is not UTF-8".into()))?;
            pos += end + 1;
            if line == "data" {
                break;
            }
            lines.push(line.to_string());
        }
        if lines.first().map(String::as_str) != Some(HEADER) {
            return Err(err(1, format!("not a checkpoint: missing header {HEADER:?}")));
        }
        let mut ck = Checkpoint {
            precision: String::new(),
            iteration: 0,
            fingerprint: String::new(),
            class_names: Vec::new(),
            anchors: Vec::new(),
            entries: Vec::new(),
            config: String::new(),
        };
        let mut config_len = 0usize;
        for (i, line) in lines.iter().enumerate().skip(1) {
            let f: Vec<&str> = line.split_whitespace().collect();
            let n = i + 1;
            let num = |s: &str| s.parse::<usize>().map_err(|_| err(n, format!("bad integer {s:?}")));
            match f.as_slice() {
                ["precision", p] => ck.precision = p.to_string(),
                ["iteration", v] => ck.iteration = num(v)?,
                ["fingerprint", v] => ck.fingerprint = v.to_string(),
                ["classes", names @ ..] => ck.class_names = names.iter().map(|s| s.to_string()).collect(),
                ["anchors", vals @ ..] => {
                    if vals.len() % 2 != 0 {
                        return Err(err(n, "anchors need width/height pairs".into()));
                    }
                    let v = vals
                        .iter()
                        .map(|s| s.parse::<f64>().map_err(|_| err(n, format!("bad anchor value {s:?}"))))
                        .collect::<Result<Vec<_>>>()?;
                    ck.anchors = v.chunks(2).map(|c| (c[0], c[1])).collect();
                }
                ["config_bytes", v] => config_len = num(v)?,
                ["entry", kind, name, dims @ ..] => ck.entries.push(CheckpointEntry {
                    kind: EntryKind::parse(kind).ok_or_else(|| err(n, format!("unknown entry kind {kind:?}")))?,
                    name: name.to_string(),
                    shape: dims.iter().map(|d| num(d)).collect::<Result<Vec<_>>>()?,
                    data: Vec::new(),
                }),
                _ => return Err(err(n, format!("unexpected header line {line:?}"))),
            }
        }
        let need: usize = ck.entries.iter().map(|e| e.shape.iter().product::<usize>() * 8).sum::<usize>() + config_len;
        if bytes.len() - pos != need {
            return Err(Error::Checkpoint(format!(
                "{}: payload has {} bytes, header describes {need}; the file is truncated or corrupt",
                origin.display(),
                bytes.len() - pos
            )));
        }
        for e in &mut ck.entries {
            let n: usize = e.shape.iter().product();
            e.data = bytes[pos..pos + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            pos += 8 * n;
        }
        ck.config = String::from_utf8(bytes[pos..].to_vec()).map_err(|_| Error::Checkpoint("embedded configuration is not UTF-8".into()))?;
        Ok(ck)
    }

    /// Writes through a temporary file so that an interrupted save leaves the old checkpoint intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming {} to {}", tmp.display(), path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
        Self::from_bytes(&bytes, path)
    }
}
