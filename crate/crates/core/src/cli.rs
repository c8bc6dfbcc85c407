//! Command-line front end: one subcommand per pipeline stage, all file based.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::builder::TypedValueParser as _;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{bench_detector, BenchResult};
use crate::config::{write_stamp, Precision, RunConfig};
use crate::data::{load_dataset, save_dataset, synth_generate, AnnotatedVideo, Dataset, Split};
use crate::error::{Error, Result};
use crate::formats::{load_detections, load_tubes, save_detections, save_tubes};
use crate::head::AnchorSet;
use crate::inference::{detect_video, ground_truth, ground_truth_tubes, link_detections, Features3d};
use crate::inspect::{branch_heatmaps, overlay};
use crate::lfb::build_bank;
use crate::metrics::{diagnostics, frame_map, video_map, DetectionRecord, EvalReport, VIDEO_THRESHOLDS};
use crate::model::{Ablation, Detector};
use crate::nn::Parameterized;
use crate::tensor::Real;
use crate::train::{Checkpoint, LogRecord, Sgd, TrainData, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Single,
    Double,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Global {
    /// TOML run configuration; the synthetic-data preset is used when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads for per-video stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Long-term feature bank at inference.
    #[arg(long, global = true, value_enum)]
    pub lfb: Option<Switch>,
    /// 2d, 3d, concat or full.
    #[arg(long, global = true)]
    pub ablation: Option<Ablation>,
    #[arg(long, global = true, value_parser = clap::builder::PossibleValuesParser::new(["8", "16", "32"]).map(|s| s.parse::<usize>().expect("listed value")))]
    pub clip_len: Option<usize>,
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub downsample: Option<u8>,
}

#[derive(Debug, Parser)]
#[command(name = "actloc", version, about = "Spatiotemporal action localization on clips")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate the synthetic motion dataset.
    Synth,
    /// Train a detector; writes checkpoints and logs.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the iteration budget.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Write frame-level detections for a split.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Link detections into action tubes.
    Link {
        #[arg(long)]
        detections: PathBuf,
        /// Number of classes; inferred from the detections when absent.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Frame-mAP of detections or video-mAP of tubes against a dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "tubes", required_unless_present = "tubes")]
        detections: Option<PathBuf>,
        #[arg(long)]
        tubes: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// IoU threshold for frame-mAP.
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Fit anchors by k-means over the training boxes.
    Anchors {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Inference throughput for 8- and 16-frame clips.
    Bench {
        /// Weights for the matching clip length; other lengths use fresh weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        clips: usize,
    },
    /// Activation heatmaps of both branches overlaid on a key frame.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        video: String,
        #[arg(long)]
        frame: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train { .. } => "train",
            Command::Detect { .. } => "detect",
            Command::Link { .. } => "link",
            Command::Eval { .. } => "eval",
            Command::Anchors { .. } => "anchors",
            Command::Bench { .. } => "bench",
            Command::Inspect { .. } => "inspect",
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    execute(&cli)
}

fn apply_overrides(cfg: &mut RunConfig, g: &Global) -> Result<()> {
    if let Some(s) = g.seed {
        cfg.train.seed = s;
        cfg.data.synth.seed = s;
    }
    if let Some(p) = g.precision {
        cfg.precision = match p {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        };
    }
    if let Some(l) = g.lfb {
        cfg.lfb.enabled = l == Switch::On;
    }
    if let Some(a) = g.ablation {
        cfg.train.ablation = a;
    }
    if let Some(d) = g.clip_len {
        cfg.backbone.clip_len = d;
        cfg.data.clip.clip_len = d;
    }
    if let Some(d) = g.downsample {
        cfg.data.clip.downsample = d as usize;
    }
    cfg.validate()
}

fn base_config(g: &Global, embedded: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match (&g.config, embedded) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(text)) => RunConfig::from_toml(text, Path::new("<checkpoint>"))?,
        (None, None) => RunConfig::desk(),
    };
    apply_overrides(&mut cfg, g)?;
    Ok(cfg)
}

fn prepare_out(g: &Global, command: &str) -> Result<PathBuf> {
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(command));
    if dir.exists() {
        let non_empty = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(format!("reading {}", dir.display()), e))?
            .next()
            .is_some();
        if non_empty && !g.force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to overwrite or choose another --out",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let cmd = cli.command.name();
    match &cli.command {
        Command::Synth => {
            let cfg = base_config(g, None)?;
            let out = prepare_out(g, cmd)?;
            let ds = synth_generate(&cfg.data.synth)?;
            save_dataset(&ds, &out)?;
            write_stamp(&out, &cfg, cmd)?;
            println!("wrote {} videos of {} classes to {}", ds.videos.len(), ds.num_classes(), out.display());
            Ok(())
        }
        Command::Train { data, resume, iters } => {
            let ck = resume.as_deref().map(Checkpoint::load).transpose()?;
            let mut cfg = base_config(g, ck.as_ref().map(|c| c.config.as_str()))?;
            if let Some(n) = iters {
                cfg.train.max_iters = *n;
            }
            let out = prepare_out(g, cmd)?;
            let ds = load_dataset(data, None)?;
            match cfg.precision {
                Precision::Single => train::<f32>(&cfg, &ds, ck.as_ref(), &out),
                Precision::Double => train::<f64>(&cfg, &ds, ck.as_ref(), &out),
            }
        }
        Command::Detect { checkpoint, data, split } => {
            let ck = Checkpoint::load(checkpoint)?;
            let cfg = base_config(g, Some(&ck.config))?;
            let out = prepare_out(g, cmd)?;
            let ds = load_dataset(data, Some((*split).into()))?;
            let threads = g.threads.unwrap_or(1).max(1);
            match cfg.precision {
                Precision::Single => detect::<f32>(&cfg, &ck, &ds, threads, &out),
                Precision::Double => detect::<f64>(&cfg, &ck, &ds, threads, &out),
            }
        }
        Command::Link { detections, classes } => {
            let cfg = base_config(g, None)?;
            let out = prepare_out(g, cmd)?;
            let dets = load_detections(detections)?;
            let n = classes.unwrap_or_else(|| dets.iter().map(|d| d.class + 1).max().unwrap_or(0));
            let tubes = link_detections(&dets, n, &cfg.link)?;
            if let Some(t) = tubes.iter().find(|t| !t.tube.is_gap_free()) {
                return Err(Error::invalid(format!("linker produced a tube with gaps in {}", t.video)));
            }
            save_tubes(&tubes, &out.join("tubes.txt"))?;
            write_stamp(&out, &cfg, cmd)?;
            println!("linked {} detections into {} tubes", dets.len(), tubes.len());
            Ok(())
        }
        Command::Eval {
            data,
            detections,
            tubes,
            split,
            iou,
        } => {
            let cfg = base_config(g, None)?;
            let out = prepare_out(g, cmd)?;
            let ds = load_dataset(data, Some((*split).into()))?;
            let reports = evaluate(&cfg, &ds, detections.as_deref(), tubes.as_deref(), *iou)?;
            let mut text = String::new();
            for r in &reports {
                println!("{r}");
                text.push_str(&r.to_records());
                text.push('\n');
            }
            write_text(&out.join("eval.txt"), &text)?;
            write_stamp(&out, &cfg, cmd)
        }
        Command::Anchors { data, k } => {
            let mut cfg = base_config(g, None)?;
            cfg.head.num_anchors = *k;
            cfg.head.anchors = None;
            let out = prepare_out(g, cmd)?;
            let ds = load_dataset(data, Some(Split::Train))?;
            let anchors = cfg.anchors_for(&ds)?;
            anchors.save(&out.join("anchors.txt"))?;
            write_stamp(&out, &cfg, cmd)?;
            print!("{}", anchors.to_text());
            Ok(())
        }
        Command::Bench { checkpoint, clips } => {
            let ck = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let cfg = base_config(g, ck.as_ref().map(|c| c.config.as_str()))?;
            let out = prepare_out(g, cmd)?;
            let results = match cfg.precision {
                Precision::Single => bench::<f32>(&cfg, ck.as_ref(), *clips)?,
                Precision::Double => bench::<f64>(&cfg, ck.as_ref(), *clips)?,
            };
            let mut text = String::new();
            for r in &results {
                println!("{r}");
                let _ = writeln!(text, "{r}");
            }
            write_text(&out.join("bench.txt"), &text)?;
            write_stamp(&out, &cfg, cmd)
        }
        Command::Inspect {
            checkpoint,
            data,
            video,
            frame,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let cfg = base_config(g, Some(&ck.config))?;
            let out = prepare_out(g, cmd)?;
            let ds = load_dataset(data, None)?;
            let v = ds
                .videos
                .iter()
                .find(|v| &v.id == video)
                .ok_or_else(|| Error::invalid(format!("video {video:?} is not in {}", data.display())))?;
            match cfg.precision {
                Precision::Single => inspect::<f32>(&cfg, &ck, v, *frame, &out)?,
                Precision::Double => inspect::<f64>(&cfg, &ck, v, *frame, &out)?,
            }
            write_stamp(&out, &cfg, cmd)
        }
    }
}

/// Detector with the checkpoint's weights; the configuration must describe the same layout.
pub fn restore_detector<T: Real>(cfg: &RunConfig, ck: &Checkpoint) -> Result<(Detector<T>, Sgd)> {
    let anchors = AnchorSet::new(ck.anchors.clone())?;
    let mut model = cfg.build_detector::<T>(anchors, ck.class_names.len())?;
    let mut opt = Sgd::default();
    ck.restore(&mut model, &mut opt)?;
    Ok((model, opt))
}

fn param_stats<T: Real>(model: &mut Detector<T>) -> String {
    let mut s = String::from("name min max mean_abs non_finite\n");
    for (name, v) in model.param_values() {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean_abs = v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64;
        let bad = v.iter().filter(|x| !x.is_finite()).count();
        let _ = writeln!(s, "{name} {lo} {hi} {mean_abs} {bad}");
    }
    s
}

fn train<T: Real>(cfg: &RunConfig, ds: &Dataset, resume: Option<&Checkpoint>, out: &Path) -> Result<()> {
    let (model, opt, start) = match resume {
        Some(ck) => {
            let (m, o) = restore_detector::<T>(cfg, ck)?;
            (m, o, ck.iteration)
        }
        None => {
            let anchors = cfg.anchors_for(ds)?;
            (cfg.build_detector::<T>(anchors, ds.num_classes())?, Sgd::default(), 0)
        }
    };
    model.anchors().save(&out.join("anchors.txt"))?;
    write_stamp(out, cfg, "train")?;
    let data = TrainData::new(ds, &cfg.data.clip)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.loss.clone(), cfg.data.augment.clone(), cfg.data.clip)?;
    trainer.opt = opt;
    trainer.iteration = start;
    let test: Vec<AnnotatedVideo> = ds.split(Split::Test).cloned().collect();
    let config_text = cfg.to_toml();
    let mut log = format!("{}\n", LogRecord::CSV_HEADER);
    let mut eval_log = String::new();
    let log_every = cfg.train.log_every.max(1);
    let result = trainer.fit(&data, &mut |t, rec| {
        let _ = writeln!(log, "{rec}");
        if rec.iteration % log_every == 0 {
            println!("iter {:>6} lr {:.3e} {}", rec.iteration, rec.lr, rec.loss);
        }
        let done = t.iteration;
        if t.cfg.checkpoint_every > 0 && done % t.cfg.checkpoint_every == 0 && done < t.cfg.max_iters {
            Checkpoint::capture(&mut t.model, &t.opt, done, &ds.class_names, &config_text).save(&out.join(format!("checkpoint_{done:06}.bin")))?;
        }
        if t.cfg.eval_every > 0 && done % t.cfg.eval_every == 0 && !test.is_empty() {
            let dets = detect_all(&t.model, &test, cfg, 1, None)?;
            let r = frame_map(&dets, &ground_truth(&test, &cfg.data.clip), 0.5, ds.num_classes());
            let _ = writeln!(eval_log, "{done} {}", r.map);
            println!("iter {done:>6} held-out frame-mAP@0.5 {:.4}", r.map);
        }
        Ok(())
    });
    write_text(&out.join("train_log.csv"), &log)?;
    if !eval_log.is_empty() {
        write_text(&out.join("eval_log.txt"), &eval_log)?;
    }
    if let Err(e) = result {
        if let Error::NonFiniteLoss { iteration, report } = &e {
            let dump = format!("iteration {iteration}\nloss {report}\n{}", param_stats(&mut trainer.model));
            write_text(&out.join("nonfinite_dump.txt"), &dump)?;
        }
        return Err(e);
    }
    Checkpoint::capture(&mut trainer.model, &trainer.opt, trainer.iteration, &ds.class_names, &config_text).save(&out.join("checkpoint.bin"))?;
    println!("trained {} iterations; checkpoint in {}", trainer.iteration, out.display());
    Ok(())
}

/// Detections for every video, in video order; per-video work is spread over `threads`.
///
/// With `lfb_dir`, each video's feature bank is also written under it.
pub fn detect_all<T: Real>(model: &Detector<T>, videos: &[AnnotatedVideo], cfg: &RunConfig, threads: usize, lfb_dir: Option<&Path>) -> Result<Vec<DetectionRecord>> {
    let one = |v: &AnnotatedVideo| -> Result<Vec<DetectionRecord>> {
        let bank = match (&model.backbone3d, cfg.lfb.enabled) {
            (Some(b), true) => Some(build_bank(v, b)?),
            _ => None,
        };
        if let (Some(bank), Some(dir)) = (&bank, lfb_dir) {
            bank.save(&dir.join(&v.id))?;
        }
        let source = match &bank {
            Some(bank) => Features3d::Bank {
                bank,
                window: cfg.lfb.window,
            },
            None => Features3d::Live,
        };
        detect_video(model, v, &cfg.data.clip, &cfg.nms, source, cfg.eval_batch)
    };
    let chunk = videos.len().div_ceil(threads.max(1)).max(1);
    let parts: Vec<Result<Vec<DetectionRecord>>> = std::thread::scope(|s| {
        let handles: Vec<_> = videos
            .chunks(chunk)
            .map(|vs| s.spawn(move || vs.iter().map(one).collect::<Result<Vec<_>>>().map(|d| d.concat())))
            .collect();
        handles.into_iter().map(|h| h.join().expect("detection worker panicked")).collect()
    });
    Ok(parts.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

fn detect<T: Real>(cfg: &RunConfig, ck: &Checkpoint, ds: &Dataset, threads: usize, out: &Path) -> Result<()> {
    let (model, _) = restore_detector::<T>(cfg, ck)?;
    let lfb_dir = out.join("lfb");
    let dets = detect_all(&model, &ds.videos, cfg, threads, cfg.lfb.enabled.then_some(lfb_dir.as_path()))?;
    save_detections(&dets, &out.join("detections.txt"))?;
    write_stamp(out, cfg, "detect")?;
    println!("wrote {} detections for {} videos", dets.len(), ds.videos.len());
    Ok(())
}

/// Frame-level reports for detections, or one video-level report per threshold for tubes.
pub fn evaluate(cfg: &RunConfig, ds: &Dataset, detections: Option<&Path>, tubes: Option<&Path>, iou: f64) -> Result<Vec<EvalReport>> {
    let n = ds.num_classes();
    match (detections, tubes) {
        (Some(p), _) => {
            let dets = load_detections(p)?;
            let gts = ground_truth(&ds.videos, &cfg.data.clip);
            let mut r = frame_map(&dets, &gts, iou, n);
            let (recall, accuracy) = diagnostics(&dets, &gts, iou);
            r.recall = Some(recall);
            r.accuracy = Some(accuracy);
            Ok(vec![r])
        }
        (None, Some(p)) => {
            let tubes = load_tubes(p)?;
            Ok(video_map(&tubes, &ground_truth_tubes(&ds.videos, &cfg.data.clip), &VIDEO_THRESHOLDS, n))
        }
        (None, None) => Err(Error::Config("eval needs --detections or --tubes".into())),
    }
}

/// Throughput at 8 and 16 frames; checkpoint weights are used where the clip length matches.
pub fn bench<T: Real>(cfg: &RunConfig, ck: Option<&Checkpoint>, clips: usize) -> Result<Vec<BenchResult>> {
    let (h, w) = (cfg.data.synth.height, cfg.data.synth.width);
    let mut out = Vec::new();
    for d in [8, 16] {
        let mut c = cfg.clone();
        c.backbone.clip_len = d;
        c.data.clip.clip_len = d;
        let model = match ck {
            Some(ck) if ck.config.contains(&format!("clip_len = {d}")) && cfg.backbone.clip_len == d => restore_detector::<T>(&c, ck)?.0,
            _ => {
                let anchors = match ck {
                    Some(ck) => AnchorSet::new(ck.anchors.clone())?,
                    None => AnchorSet::default_for_grid(h / c.backbone.stride),
                };
                let classes = ck.map_or(c.data.synth.classes.len(), |ck| ck.class_names.len());
                c.build_detector::<T>(anchors, classes)?
            }
        };
        out.push(bench_detector(&model, h, w, clips, 2, &c.nms)?);
    }
    Ok(out)
}

fn inspect<T: Real>(cfg: &RunConfig, ck: &Checkpoint, v: &AnnotatedVideo, frame: usize, out: &Path) -> Result<()> {
    let (model, _) = restore_detector::<T>(cfg, ck)?;
    let (h2, h3) = branch_heatmaps(&model, v, frame, &cfg.data.clip)?;
    for (tag, heat) in [("2d", h2), ("3d", h3)] {
        if let Some(heat) = heat {
            let p = out.join(format!("{}_{frame:04}_{tag}.png", v.id));
            overlay(&v.frames[frame], &heat, 0.5).save(&p).map_err(|e| Error::Image {
                path: p.clone(),
                msg: e.to_string(),
            })?;
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}
