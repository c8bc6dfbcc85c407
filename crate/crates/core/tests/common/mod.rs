#![allow(dead_code)]

use std::time::Instant;

use actloc::backbone::BackboneConfig;
use actloc::cfam::{attend, attention_map, gram, Cfam, CfamConfig};
use actloc::cli::detect_all;
use actloc::config::RunConfig;
use actloc::data::{sample_clip, synth_generate, AnnotatedVideo, ClipSpec, Dataset, HistoryPad, Split, SynthConfig};
use actloc::head::{build_targets, decode, AnchorSet, ClassMode, LabeledBox, RawGrid, CLASS0, TCONF, TH, TW, TX, TY};
use actloc::inference::{ground_truth, ground_truth_tubes, link_detections, raw_grids, Features3d};
use actloc::lfb::{build_bank, FeatureBank};
use actloc::linker::{best_path, link_score, LinkConfig};
use actloc::loss::{
    classification_loss, detection_loss, focal_loss, mse_conf, smooth_l1, total_loss, ClassTargets, LossConfig,
};
use actloc::metrics::{frame_map, video_map, DetectionRecord, GroundTruth};
use actloc::model::{Ablation, Detector, ModelSpec};
use actloc::nn::{Mode, Parameterized, Visitor};
use actloc::postprocess::nms_indices;
use actloc::tensor::{grad_check, ConvGeometry};
use actloc::train::{TrainData, Trainer};
use actloc::{no_grad, BBox, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], r: &mut impl Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

pub fn random_box(r: &mut impl Rng) -> BBox {
    let w = r.gen_range(0.05..0.5);
    let h = r.gen_range(0.05..0.5);
    BBox::new(r.gen_range(0.0..1.0 - w), r.gen_range(0.0..1.0 - h), w, h)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- gradients

pub const GRAD_TOL: f64 = 1e-4;

type UnaryOp = dyn Fn(&Tensor<f64>) -> actloc::Result<Tensor<f64>>;
const EPS: f64 = 1e-5;

/// Worst relative error of one named gradient family.
#[derive(Debug, Clone)]
pub struct GradFamily {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
}

type Scalar = Box<dyn Fn(&Tensor<f64>) -> actloc::Result<Tensor<f64>>>;

/// Contracts a tensor-valued `f` with a fixed random weight so the upstream gradient is non-trivial.
fn contract<F>(f: F, x: &Tensor<f64>, r: &mut ChaCha8Rng) -> Scalar
where
    F: Fn(&Tensor<f64>) -> actloc::Result<Tensor<f64>> + 'static,
{
    let shape = no_grad(|| f(x)).unwrap().shape().to_vec();
    let w = random(&shape, r, -1.0, 1.0);
    Box::new(move |t| Ok(f(t)?.mul(&w)?.sum()))
}

fn scalar(f: impl Fn(&Tensor<f64>) -> actloc::Result<Tensor<f64>> + 'static) -> Scalar {
    Box::new(f)
}

fn rel_error(f: &Scalar, x: &Tensor<f64>, coords: Option<&[usize]>) -> f64 {
    grad_check(f, x, EPS, coords).map(|r| r.max_rel_error).unwrap_or(f64::INFINITY)
}

struct Families(Vec<GradFamily>);

impl Families {
    fn record(&mut self, name: &str, err: f64) {
        match self.0.iter_mut().find(|f| f.name == name) {
            Some(f) => {
                f.instances += 1;
                f.worst = f.worst.max(err);
            }
            None => self.0.push(GradFamily {
                name: name.into(),
                instances: 1,
                worst: err,
            }),
        }
    }
}

/// Elementwise and structural operations, convolutions, normalization, losses and fusion.
pub fn operation_gradients(seeds: u64) -> Vec<GradFamily> {
    let mut out = Families(Vec::new());
    for seed in 0..seeds {
        let r = &mut rng(1000 + seed);
        let x = random(&[3, 4], r, -2.0, 2.0);
        let pos = random(&[3, 4], r, 0.5, 2.0);
        let other = random(&[3, 4], r, -2.0, 2.0);
        let unary: Vec<(&str, Box<UnaryOp>)> = vec![
            ("relu", Box::new(|t: &Tensor<f64>| Ok(t.relu()))),
            ("leaky_relu", Box::new(|t: &Tensor<f64>| Ok(t.leaky_relu(0.1)))),
            ("sigmoid", Box::new(|t: &Tensor<f64>| Ok(t.sigmoid()))),
            ("exp", Box::new(|t: &Tensor<f64>| Ok(t.exp()))),
            ("square", Box::new(|t: &Tensor<f64>| Ok(t.square()))),
            ("neg", Box::new(|t: &Tensor<f64>| Ok(t.neg()))),
            ("smooth_l1", Box::new(|t: &Tensor<f64>| Ok(t.smooth_l1()))),
            ("clamp", Box::new(|t: &Tensor<f64>| Ok(t.clamp(-1.0, 1.0)))),
            ("scale", Box::new(|t: &Tensor<f64>| Ok(t.scale(-2.5)))),
            ("add_scalar", Box::new(|t: &Tensor<f64>| Ok(t.add_scalar(0.7)))),
            ("softmax_rows", Box::new(|t: &Tensor<f64>| t.softmax_rows())),
            ("transpose", Box::new(|t: &Tensor<f64>| t.t())),
            ("reshape", Box::new(|t: &Tensor<f64>| t.reshape(&[2, 6]))),
            ("narrow", Box::new(|t: &Tensor<f64>| t.narrow(1, 1, 2))),
            ("select_rows", Box::new(|t: &Tensor<f64>| t.select_rows(&[2, 0, 2]))),
            ("sum_axis", Box::new(|t: &Tensor<f64>| t.sum_axis(0))),
            ("mean_axis", Box::new(|t: &Tensor<f64>| t.mean_axis(1))),
            ("mean", Box::new(|t: &Tensor<f64>| Ok(t.mean()))),
        ];
        for (name, f) in unary {
            let s = contract(f, &x, r);
            out.record(name, rel_error(&s, &x, None));
        }
        for (name, f) in [
            ("log", Box::new(|t: &Tensor<f64>| t.log()) as Scalar),
            ("powf", Box::new(|t: &Tensor<f64>| t.powf(1.7))),
        ] {
            let s = contract(f, &pos, r);
            out.record(name, rel_error(&s, &pos, None));
        }
        let o = other.clone();
        out.record("add", rel_error(&contract(move |t| t.add(&o), &x, r), &x, None));
        let o = other.clone();
        out.record("sub", rel_error(&contract(move |t| o.sub(t), &x, r), &x, None));
        let o = other.clone();
        out.record("mul", rel_error(&contract(move |t| t.mul(&o), &x, r), &x, None));
        let o = other.clone();
        out.record("concat", rel_error(&contract(move |t| Tensor::concat(&[o.clone(), t.clone()], 1), &x, r), &x, None));
        let rhs = random(&[4, 2], r, -1.0, 1.0);
        out.record("matmul", rel_error(&contract(move |t| t.matmul(&rhs), &x, r), &x, None));
        let lhs = random(&[5, 3], r, -1.0, 1.0);
        out.record("matmul", rel_error(&contract(move |t| lhs.matmul(t), &x, r), &x, None));
        let cube = random(&[2, 3, 4], r, -1.0, 1.0);
        out.record("permute", rel_error(&contract(|t| t.permute(&[2, 0, 1]), &cube, r), &cube, None));

        // convolutions
        let img = random(&[2, 3, 5, 5], r, -1.0, 1.0);
        let w2 = random(&[4, 3, 3, 3], r, -0.5, 0.5);
        let b2 = random(&[4], r, -0.5, 0.5);
        let g2 = ConvGeometry::new_2d(3, 2, 1);
        let (w, b) = (w2.clone(), b2.clone());
        out.record("conv2d", rel_error(&contract(move |t| t.conv(&w, Some(&b), g2), &img, r), &img, None));
        let (i, b) = (img.clone(), b2.clone());
        out.record("conv2d", rel_error(&contract(move |t| i.conv(t, Some(&b), g2), &w2, r), &w2, None));
        let (i, w) = (img.clone(), w2.clone());
        out.record("conv2d", rel_error(&contract(move |t| i.conv(&w, Some(t), g2), &b2, r), &b2, None));
        let vol = random(&[2, 2, 4, 5, 5], r, -1.0, 1.0);
        let w3 = random(&[3, 2, 3, 3, 3], r, -0.5, 0.5);
        let g3 = ConvGeometry::new_3d([3, 3, 3], [1, 2, 2], [1, 1, 1]);
        let w = w3.clone();
        out.record("conv3d", rel_error(&contract(move |t| t.conv(&w, None, g3), &vol, r), &vol, None));
        let v = vol.clone();
        out.record("conv3d", rel_error(&contract(move |t| v.conv(t, None, g3), &w3, r), &w3, None));

        // normalization
        let feat = random(&[4, 3, 2, 2], r, -1.0, 1.0);
        let gamma = random(&[3], r, 0.5, 1.5);
        let beta = random(&[3], r, -0.5, 0.5);
        let (g, b) = (gamma.clone(), beta.clone());
        out.record("batch_norm_train", rel_error(&contract(move |t| Ok(t.batch_norm_train(&g, &b, 1e-5)?.0), &feat, r), &feat, None));
        let (f, b) = (feat.clone(), beta.clone());
        out.record("batch_norm_train", rel_error(&contract(move |t| Ok(f.batch_norm_train(t, &b, 1e-5)?.0), &gamma, r), &gamma, None));
        let (g, b) = (gamma.clone(), beta.clone());
        let mean: Vec<f64> = (0..3).map(|_| r.gen_range(-0.3..0.3)).collect();
        let var: Vec<f64> = (0..3).map(|_| r.gen_range(0.5..2.0)).collect();
        out.record("batch_norm_eval", rel_error(&contract(move |t| t.batch_norm_eval(&g, &b, &mean, &var, 1e-5), &feat, r), &feat, None));

        // losses
        let target = random(&[3, 4], r, -2.0, 2.0);
        let tg = target.clone();
        out.record("loss.smooth_l1", rel_error(&scalar(move |t: &Tensor<f64>| smooth_l1(t, &tg)), &x, None));
        let tg = target.clone();
        let wts = random(&[3, 4], r, 0.1, 1.0);
        out.record("loss.mse_conf", rel_error(&scalar(move |t: &Tensor<f64>| mse_conf(t, &tg, Some(&wts))), &x, None));
        let prob = random(&[6], r, 0.05, 0.95);
        let labels: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
        let alpha: Vec<f64> = (0..6).map(|_| r.gen_range(0.2..1.0)).collect();
        out.record("loss.focal", rel_error(&scalar(move |t: &Tensor<f64>| focal_loss(t, &labels, 2.0, &alpha)), &prob, None));
        let logits = random(&[4, 5], r, -2.0, 2.0);
        let ids: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
        let cw: Vec<f64> = (0..5).map(|_| r.gen_range(0.3..1.0)).collect();
        let (i, c) = (ids.clone(), cw.clone());
        out.record(
            "loss.classification",
            rel_error(&scalar(move |t: &Tensor<f64>| classification_loss(t, &ClassTargets::Single(i.clone()), ClassMode::Single, 2.0, &c)), &logits, None),
        );
        let hot: Vec<Vec<f64>> = ids
            .iter()
            .map(|&k| {
                let mut row = vec![0.0; 5];
                row[k % 3] = 1.0;
                row[3] = (k % 2) as f64;
                row
            })
            .collect();
        out.record(
            "loss.classification",
            rel_error(
                &scalar(move |t: &Tensor<f64>| classification_loss(t, &ClassTargets::Multi(hot.clone()), ClassMode::Multi { pose: 3 }, 2.0, &cw)),
                &logits,
                None,
            ),
        );
        let (raw, f) = detection_case(r);
        out.record("loss.detection", rel_error(&f, &raw, None));

        // fusion
        let b = random(&[4, 3, 3], r, -1.0, 1.0);
        let a = random(&[1], r, -1.0, 1.0);
        let aa = a.clone();
        out.record("cfam.attend", rel_error(&contract(move |t| attend(t, &aa), &b, r), &b, None));
        let bb = b.clone();
        out.record("cfam.attend", rel_error(&contract(move |t| attend(&bb, t), &a, r), &a, None));
    }
    out.0
}

fn detection_case(r: &mut ChaCha8Rng) -> (Tensor<f64>, Scalar) {
    let anchors = AnchorSet::new(vec![(0.8, 1.2), (1.6, 1.4)]).unwrap();
    let (k, nc, g) = (2, 3, 3);
    let raw = random(&[2, k * (5 + nc), g, g], r, -1.5, 1.5);
    let targets: Vec<_> = (0..2)
        .map(|_| {
            let gts: Vec<LabeledBox> = (0..2)
                .map(|_| LabeledBox {
                    bbox: random_box(r),
                    class: r.gen_range(0..nc),
                })
                .collect();
            build_targets(&gts, &anchors, (g, g)).unwrap()
        })
        .collect();
    let cfg = LossConfig {
        rescore: false,
        ..LossConfig::default()
    };
    let weights = vec![0.9, 0.6, 0.7];
    let f: Scalar = Box::new(move |t| Ok(detection_loss(t, &targets, &anchors, nc, &weights, &cfg)?.0));
    (raw, f)
}

struct Replace {
    name: String,
    value: Tensor<f64>,
}

impl Visitor<f64> for Replace {
    fn param(&mut self, name: &str, t: &mut Tensor<f64>) {
        if name == self.name {
            *t = self.value.clone();
        }
    }
}

pub fn tiny_spec(ablation: Ablation, seed: u64) -> ModelSpec {
    let mut r = rng(seed);
    let anchors = AnchorSet::new(vec![(r.gen_range(0.5..1.0), r.gen_range(0.5..1.0)), (1.5, 1.2)]).unwrap();
    ModelSpec {
        backbone: BackboneConfig {
            widths_2d: vec![3, 4, 4],
            widths_3d: vec![3, 4, 4],
            out_2d: 4,
            out_3d: 4,
            stride: 8,
            clip_len: 4,
            leaky_slope: 0.1,
        },
        cfam: CfamConfig {
            channels: 4,
            out_channels: 4,
        },
        anchors,
        num_classes: 3,
        class_mode: ClassMode::Single,
        ablation,
    }
}

/// `L_final` of a two-sample batch through both backbones, fusion and head, in training mode.
pub fn composite_gradients(seeds: u64) -> Vec<GradFamily> {
    let mut out = Families(Vec::new());
    for seed in 0..seeds {
        let r = &mut rng(2000 + seed);
        let spec = tiny_spec(Ablation::Full, seed);
        let anchors = spec.anchors.clone();
        let mut model = Detector::<f64>::new(spec, r).unwrap();
        // the gate starts at zero; move it so the attention path carries gradient
        model.cfam.alpha = Tensor::from_f64(&[1], &[0.3]).unwrap().into_param();
        let clips = random(&[2, 3, 4, 16, 16], r, 0.0, 1.0);
        let keys = random(&[2, 3, 16, 16], r, 0.0, 1.0);
        let targets: Vec<_> = (0..2)
            .map(|_| {
                let gts = vec![LabeledBox {
                    bbox: random_box(r),
                    class: r.gen_range(0..3),
                }];
                build_targets(&gts, &anchors, (2, 2)).unwrap()
            })
            .collect();
        let cfg = LossConfig {
            rescore: false,
            ..LossConfig::default()
        };
        let loss = move |m: &Detector<f64>, c: &Tensor<f64>, k: &Tensor<f64>| -> actloc::Result<Tensor<f64>> {
            let raw = m.forward(c, k, Mode::Train)?;
            Ok(detection_loss(&raw, &targets, m.anchors(), 3, &[1.0, 0.8, 0.6], &cfg)?.0)
        };
        let loss = std::rc::Rc::new(loss);
        let pick = |n: usize, r: &mut ChaCha8Rng| -> Vec<usize> { (0..6).map(|_| r.gen_range(0..n)).collect() };

        let (m, k, l) = (model.clone(), keys.clone(), loss.clone());
        let f: Scalar = Box::new(move |c| l(&m, c, &k));
        let coords = pick(clips.numel(), r);
        out.record("composite.clip_input", rel_error(&f, &clips, Some(&coords)));

        let (m, c, l) = (model.clone(), clips.clone(), loss.clone());
        let f: Scalar = Box::new(move |k| l(&m, &c, k));
        let coords = pick(keys.numel(), r);
        out.record("composite.key_input", rel_error(&f, &keys, Some(&coords)));

        for (name, values) in model.clone().param_values() {
            let shape = param_shape(&mut model, &name);
            let x = Tensor::from_f64(&shape, &values).unwrap();
            let (m, c, k, l, n) = (model.clone(), clips.clone(), keys.clone(), loss.clone(), name.clone());
            let f: Scalar = Box::new(move |w| {
                let mut m = m.clone();
                m.visit(
                    "",
                    &mut Replace {
                        name: n.clone(),
                        value: w.clone(),
                    },
                );
                l(&m, &c, &k)
            });
            let coords = pick(x.numel(), r);
            out.record(&format!("composite.{}", family_of(&name)), rel_error(&f, &x, Some(&coords)));
        }
    }
    out.0
}

fn family_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

fn param_shape(model: &mut Detector<f64>, name: &str) -> Vec<usize> {
    struct Shape<'a>(&'a str, Vec<usize>);
    impl Visitor<f64> for Shape<'_> {
        fn param(&mut self, n: &str, t: &mut Tensor<f64>) {
            if n == self.0 {
                self.1 = t.shape().to_vec();
            }
        }
    }
    let mut s = Shape(name, Vec::new());
    model.visit("", &mut s);
    s.1
}

/// Every family below tolerance and at least `min_instances` instances in total.
pub fn gradient_integrity(op_seeds: u64, composite_seeds: u64, min_instances: usize) -> Check {
    let start = Instant::now();
    let mut fams = operation_gradients(op_seeds);
    fams.extend(composite_gradients(composite_seeds));
    let total: usize = fams.iter().map(|f| f.instances).sum();
    let worst = fams.iter().map(|f| f.worst).fold(0.0, f64::max);
    let bad: Vec<String> = fams
        .iter()
        .filter(|f| !(f.worst < GRAD_TOL))
        .map(|f| format!("{} ({:.2e})", f.name, f.worst))
        .collect();
    ensure(bad.is_empty(), || format!("families over tolerance: {}", bad.join(", ")))?;
    ensure(total >= min_instances, || format!("only {total} instances"))?;
    Ok(format!(
        "{total} instances over {} families, worst relative error {worst:.2e}, {:.1}s",
        fams.len(),
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- fusion

/// `alpha·(M·F) + B` by explicit loops.
pub fn naive_attend(b: &[f64], c: usize, hw: usize, alpha: f64) -> Vec<f64> {
    let mut g = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            g[i * c + j] = (0..hw).map(|n| b[i * hw + n] * b[j * hw + n]).sum();
        }
    }
    let mut m = vec![0.0; c * c];
    for i in 0..c {
        let mx = (0..c).map(|j| g[i * c + j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|j| (g[i * c + j] - mx).exp()).sum();
        for j in 0..c {
            m[i * c + j] = (g[i * c + j] - mx).exp() / z;
        }
    }
    let mut out = vec![0.0; c * hw];
    for i in 0..c {
        for n in 0..hw {
            let e: f64 = (0..c).map(|j| m[i * c + j] * b[j * hw + n]).sum();
            out[i * hw + n] = alpha * e + b[i * hw + n];
        }
    }
    out
}

pub fn cfam_suite(seeds: u64) -> Check {
    let mut worst_sym: f64 = 0.0;
    let mut worst_row: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    let mut worst_perm: f64 = 0.0;
    for seed in 0..seeds {
        let r = &mut rng(3000 + seed);
        let c = r.gen_range(2..9);
        let (h, w) = (r.gen_range(1..5), r.gen_range(1..5));
        let b = random(&[c, h, w], r, -1.0, 1.0);
        let f = b.reshape(&[c, h * w]).unwrap();
        let g = gram(&f).unwrap();
        let gv = g.values();
        for i in 0..c {
            for j in 0..c {
                worst_sym = worst_sym.max((gv[i * c + j] - gv[j * c + i]).abs());
            }
        }
        let m = attention_map(&g).unwrap().m;
        let mv = m.values();
        for i in 0..c {
            let s: f64 = mv[i * c..(i + 1) * c].iter().sum();
            worst_row = worst_row.max((s - 1.0).abs());
            ensure(mv[i * c..(i + 1) * c].iter().all(|&p| p > 0.0 && p < 1.0) || c == 1, || format!("seed {seed}: entry outside (0,1)"))?;
        }
        let zero = Tensor::<f64>::zeros(&[1]);
        let y0 = attend(&b, &zero).unwrap();
        ensure(y0.values() == b.values(), || format!("seed {seed}: alpha = 0 is not the identity"))?;
        let alpha = r.gen_range(-2.0..2.0);
        let y = attend(&b, &Tensor::from_f64(&[1], &[alpha]).unwrap()).unwrap();
        let oracle = naive_attend(b.values(), c, h * w, alpha);
        for (a, o) in y.values().iter().zip(&oracle) {
            worst_oracle = worst_oracle.max((a - o).abs());
        }
        let mut perm: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let bp = b.reshape(&[c, h * w]).unwrap().select_rows(&perm).unwrap().reshape(&[c, h, w]).unwrap();
        let yp = attend(&bp, &Tensor::from_f64(&[1], &[alpha]).unwrap()).unwrap();
        let hw = h * w;
        for (k, &p) in perm.iter().enumerate() {
            for n in 0..hw {
                worst_perm = worst_perm.max((yp.values()[k * hw + n] - y.values()[p * hw + n]).abs());
            }
        }
    }
    ensure(worst_sym <= 1e-6, || format!("Gram asymmetry {worst_sym:e}"))?;
    ensure(worst_row <= 1e-6, || format!("row sum error {worst_row:e}"))?;
    ensure(worst_oracle <= 1e-6, || format!("loop oracle difference {worst_oracle:e}"))?;
    ensure(worst_perm <= 1e-6, || format!("permutation equivariance error {worst_perm:e}"))?;

    let mut r = rng(31);
    let cfam = Cfam::<f64>::new(6, &CfamConfig { channels: 4, out_channels: 5 }, &mut r).unwrap();
    let a = random(&[6, 3, 3], &mut r, -1.0, 1.0);
    let with = cfam.forward(&a.reshape(&[1, 6, 3, 3]).unwrap(), Mode::Eval, true).unwrap();
    let without = cfam.forward(&a.reshape(&[1, 6, 3, 3]).unwrap(), Mode::Eval, false).unwrap();
    ensure(with.values() == without.values(), || "module with a zero gate differs from the bypass".into())?;
    Ok(format!(
        "{seeds} random maps: symmetry {worst_sym:.1e}, row sums {worst_row:.1e}, loop oracle {worst_oracle:.1e}, permutation {worst_perm:.1e}, zero gate exact"
    ))
}

// ---------------------------------------------------------------- loss vectors

pub fn loss_vectors() -> Check {
    let t = |v: &[f64]| Tensor::<f64>::from_f64(&[v.len()], v).unwrap();
    let close = |a: f64, b: f64, what: &str| ensure((a - b).abs() <= 1e-9, || format!("{what}: {a} vs {b}"));
    close(smooth_l1(&t(&[0.3]), &t(&[0.3])).unwrap().item(), 0.0, "smooth-L1 x=y")?;
    close(smooth_l1(&t(&[0.5]), &t(&[0.0])).unwrap().item(), 0.125, "smooth-L1 |d|=0.5")?;
    close(smooth_l1(&t(&[0.0]), &t(&[2.0])).unwrap().item(), 1.5, "smooth-L1 |d|=2")?;
    close(focal_loss(&t(&[1.0]), &[1.0], 2.0, &[1.0]).unwrap().item(), 0.0, "focal perfect")?;
    close(focal_loss(&t(&[0.5]), &[1.0], 0.0, &[1.0]).unwrap().item(), std::f64::consts::LN_2, "focal gamma 0")?;
    close(focal_loss(&t(&[0.9]), &[1.0], 2.0, &[1.0]).unwrap().item(), -(0.1f64 * 0.1) * 0.9f64.ln(), "focal gamma 2")?;
    ensure((focal_loss(&t(&[0.9]), &[1.0], 2.0, &[1.0]).unwrap().item() - 1.0536e-3).abs() < 1e-7, || "focal 1.0536e-3".into())?;
    let logits = Tensor::<f64>::from_f64(&[1, 2], &[0.4, 0.4]).unwrap();
    close(
        classification_loss(&logits, &ClassTargets::Single(vec![0]), ClassMode::Single, 0.0, &[1.0, 1.0]).unwrap().item(),
        std::f64::consts::LN_2,
        "two equal logits",
    )?;
    close(total_loss(&t(&[2.0]), &t(&[1.0]), 0.5).unwrap().sum().item(), 2.0, "L_final")?;
    close(total_loss(&t(&[0.0]), &t(&[0.0]), 0.5).unwrap().sum().item(), 0.0, "L_final zero")?;
    close(total_loss(&t(&[3.0]), &t(&[1.25]), 0.0).unwrap().sum().item(), 1.25, "L_final lambda 0")?;
    Ok("smooth-L1 {0, 0.125, 1.5}, focal {0, ln 2, 1.0536e-3}, L_final compositions all within 1e-9".into())
}

// ---------------------------------------------------------------- oracles

/// The unique kept set satisfying: a box is kept iff no kept box ranked before it overlaps it above the threshold.
pub fn brute_force_nms(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let n = boxes.len();
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut pos = vec![0; n];
    for (p, &i) in rank.iter().enumerate() {
        pos[i] = p;
    }
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let kept = |i: usize| mask >> i & 1 == 1;
        let consistent = (0..n).all(|i| {
            let blocked = (0..n).any(|j| kept(j) && pos[j] < pos[i] && boxes[j].iou(&boxes[i]) > thr);
            kept(i) == !blocked
        });
        if consistent {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "the fixed point is unique");
    let mut out: Vec<usize> = (0..n).filter(|&i| found[0] >> i & 1 == 1).collect();
    out.sort_by_key(|&i| pos[i]);
    out
}

pub fn nms_oracle(seeds: u64) -> Check {
    for seed in 0..seeds {
        let r = &mut rng(4000 + seed);
        let n = r.gen_range(0..=8);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(r)).collect();
        let scores: Vec<f64> = (0..n).map(|_| if r.gen_bool(0.15) { 0.5 } else { r.gen_range(0.0..1.0) }).collect();
        let thr = r.gen_range(0.1..0.7);
        let got = nms_indices(&boxes, &scores, thr);
        let want = brute_force_nms(&boxes, &scores, thr);
        ensure(got == want, || format!("seed {seed}: {got:?} vs {want:?}"))?;
    }
    Ok(format!("{seeds} seeds"))
}

fn det(r: &mut ChaCha8Rng) -> actloc::head::Detection {
    actloc::head::Detection {
        frame: 0,
        bbox: BBox::new(r.gen_range(0.0..0.4), r.gen_range(0.0..0.4), r.gen_range(0.2..0.6), r.gen_range(0.2..0.6)),
        confidence: r.gen_range(0.0..1.0),
        class_scores: vec![r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)],
    }
}

pub fn viterbi_oracle(seeds: u64) -> Check {
    let cfg = LinkConfig::default();
    for seed in 0..seeds {
        let r = &mut rng(5000 + seed);
        let t = r.gen_range(1..=5);
        let frames: Vec<Vec<_>> = (0..t).map(|_| (0..r.gen_range(1..=4)).map(|_| det(r)).collect()).collect();
        let class = r.gen_range(0..2);
        let (path, score) = best_path(&frames, class, &cfg).map_err(|e| e.to_string())?;
        let mut best: Option<(Vec<usize>, f64)> = None;
        let total: usize = frames.iter().map(Vec::len).product();
        for mut code in 0..total {
            let mut p = Vec::with_capacity(t);
            for f in &frames {
                p.push(code % f.len());
                code /= f.len();
            }
            let s: f64 = (1..t)
                .map(|i| {
                    let (a, b) = (&frames[i - 1][p[i - 1]], &frames[i][p[i]]);
                    link_score(a.score(class), b.score(class), a.bbox.iou(&b.bbox), &cfg)
                })
                .sum();
            if best.as_ref().is_none_or(|(_, bs)| s > *bs + 1e-12) {
                best = Some((p, s));
            }
        }
        let (bp, bs) = best.expect("at least one path");
        ensure((score - bs).abs() <= 1e-9, || format!("seed {seed}: score {score} vs {bs}"))?;
        let s_of = |p: &[usize]| -> f64 {
            (1..t)
                .map(|i| {
                    let (a, b) = (&frames[i - 1][p[i - 1]], &frames[i][p[i]]);
                    link_score(a.score(class), b.score(class), a.bbox.iou(&b.bbox), &cfg)
                })
                .sum()
        };
        ensure((s_of(&path) - score).abs() <= 1e-9, || format!("seed {seed}: returned path does not score {score}"))?;
        let unique = (0..total).filter(|&c| {
            let mut code = c;
            let p: Vec<usize> = frames
                .iter()
                .map(|f| {
                    let v = code % f.len();
                    code /= f.len();
                    v
                })
                .collect();
            (s_of(&p) - bs).abs() <= 1e-12
        });
        if unique.count() == 1 {
            ensure(path == bp, || format!("seed {seed}: path {path:?} vs {bp:?}"))?;
        }
    }
    Ok(format!("{seeds} seeds"))
}

/// Reference frame-AP built from an explicit precision/recall table with the interpolated envelope.
pub fn reference_frame_map(dets: &[DetectionRecord], gts: &[GroundTruth], thr: f64, num_classes: usize) -> f64 {
    let mut aps = Vec::new();
    for c in 0..num_classes {
        let cg: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == c).collect();
        if cg.is_empty() {
            continue;
        }
        let mut cd: Vec<(usize, &DetectionRecord)> = dets.iter().filter(|d| d.class == c).enumerate().collect();
        cd.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
        let mut taken = vec![false; cg.len()];
        let mut table: Vec<(f64, f64)> = Vec::new();
        let (mut tp, mut fp) = (0.0, 0.0);
        for (_, d) in cd {
            let mut best = None;
            let mut best_iou = thr;
            for (j, g) in cg.iter().enumerate() {
                if taken[j] || g.video != d.video || g.frame != d.frame {
                    continue;
                }
                let o = d.bbox.iou(&g.bbox);
                if o >= best_iou && best.is_none_or(|_| o > best_iou) {
                    best = Some(j);
                    best_iou = o;
                }
            }
            match best {
                Some(j) => {
                    taken[j] = true;
                    tp += 1.0;
                }
                None => fp += 1.0,
            }
            table.push((tp / cg.len() as f64, tp / (tp + fp)));
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        for (i, &(rec, _)) in table.iter().enumerate() {
            if rec > prev {
                let envelope = table[i..].iter().map(|e| e.1).fold(0.0, f64::max);
                ap += (rec - prev) * envelope;
                prev = rec;
            }
        }
        aps.push(ap);
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

pub fn frame_map_oracle(seeds: u64) -> Check {
    let g = |frame, x| GroundTruth {
        video: "v".into(),
        frame,
        class: 0,
        bbox: BBox::new(x, 0.1, 0.2, 0.2),
    };
    let d = |frame, x, score| DetectionRecord {
        video: "v".into(),
        frame,
        class: 0,
        score,
        bbox: BBox::new(x, 0.1, 0.2, 0.2),
    };
    let gts = vec![g(0, 0.1), g(1, 0.5)];
    let dets = vec![d(0, 0.1, 0.9), d(0, 0.7, 0.8), d(1, 0.5, 0.7)];
    let hand = frame_map(&dets, &gts, 0.5, 1).map;
    ensure((hand - 5.0 / 6.0).abs() < 1e-12, || format!("TP,FP,TP case gave {hand}"))?;
    ensure((reference_frame_map(&dets, &gts, 0.5, 1) - 5.0 / 6.0).abs() < 1e-12, || "reference disagrees with hand value".into())?;
    for seed in 0..seeds {
        let r = &mut rng(6000 + seed);
        let nc = r.gen_range(1..4);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for v in 0..2 {
            for frame in 0..3 {
                for _ in 0..r.gen_range(0..3) {
                    let b = random_box(r);
                    let class = r.gen_range(0..nc);
                    gts.push(GroundTruth {
                        video: format!("v{v}"),
                        frame,
                        class,
                        bbox: b,
                    });
                    for _ in 0..r.gen_range(0..3) {
                        let j = 0.05;
                        dets.push(DetectionRecord {
                            video: format!("v{v}"),
                            frame,
                            class: if r.gen_bool(0.8) { class } else { r.gen_range(0..nc) },
                            score: r.gen_range(0.0..1.0),
                            bbox: BBox::new(b.x + r.gen_range(-j..j), b.y + r.gen_range(-j..j), b.w, b.h),
                        });
                    }
                }
                if r.gen_bool(0.3) {
                    dets.push(DetectionRecord {
                        video: format!("v{v}"),
                        frame,
                        class: r.gen_range(0..nc),
                        score: r.gen_range(0.0..1.0),
                        bbox: random_box(r),
                    });
                }
            }
        }
        gts.truncate(10);
        dets.truncate(20);
        let got = frame_map(&dets, &gts, 0.5, nc).map;
        let want = reference_frame_map(&dets, &gts, 0.5, nc);
        ensure((got - want).abs() < 1e-12, || format!("seed {seed}: {got} vs {want}"))?;
    }
    Ok(format!("hand case 0.8333 plus {seeds} random seeds"))
}

pub fn decode_round_trip(seeds: u64) -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let r = &mut rng(7000 + seed);
        let grid = r.gen_range(2..10);
        let k = r.gen_range(1..4);
        let nc = 2;
        let anchors = AnchorSet::new((0..k).map(|_| (r.gen_range(0.3..3.0), r.gen_range(0.3..3.0))).collect()).unwrap();
        let gts: Vec<LabeledBox> = (0..r.gen_range(1..4))
            .map(|_| LabeledBox {
                bbox: random_box(r),
                class: r.gen_range(0..nc),
            })
            .collect();
        let ft = build_targets(&gts, &anchors, (grid, grid)).map_err(|e| e.to_string())?;
        let mut raw = RawGrid::new(vec![0.0; k * (5 + nc) * grid * grid], k, nc, grid, grid).unwrap();
        for a in &ft.assignments {
            let t = a.raw_targets();
            let (x, y) = a.cell;
            for (ch, v) in [(TX, t[0]), (TY, t[1]), (TW, t[2]), (TH, t[3]), (TCONF, 10.0), (CLASS0 + a.class, 5.0)] {
                raw.set(a.anchor, ch, y, x, v);
            }
        }
        let dets = decode(&raw, &anchors, ClassMode::Single, 0).unwrap();
        for a in &ft.assignments {
            let b = dets[a.slot].bbox;
            let g = gts[a.gt].bbox;
            for (p, q) in [(b.x, g.x), (b.y, g.y), (b.w, g.w), (b.h, g.h)] {
                worst = worst.max((p - q).abs());
            }
            ensure(dets[a.slot].best_class() == a.class, || format!("seed {seed}: class lost"))?;
        }
    }
    ensure(worst <= 1e-6, || format!("round-trip error {worst:e}"))?;
    Ok(format!("{seeds} seeds, worst coordinate error {worst:.1e}"))
}

// ---------------------------------------------------------------- end to end

pub fn synthetic_dataset() -> Dataset {
    synth_generate(&SynthConfig::default()).expect("default synthetic config is valid")
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub ablation: Ablation,
    pub seed: u64,
    pub frame_map: f64,
    pub video_map: Option<f64>,
    pub gap_free: bool,
    pub train_seconds: f64,
    pub seconds: f64,
}

/// Trains the desk preset for one ablation and seed and scores the held-out split.
pub fn run_experiment(ds: &Dataset, ablation: Ablation, seed: u64, tubes: bool) -> actloc::Result<Outcome> {
    let start = Instant::now();
    let mut cfg = RunConfig::desk();
    cfg.train.ablation = ablation;
    cfg.train.seed = seed;
    let anchors = cfg.anchors_for(ds)?;
    let model = cfg.build_detector::<f32>(anchors, ds.num_classes())?;
    let data = TrainData::new(ds, &cfg.data.clip)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.loss.clone(), cfg.data.augment.clone(), cfg.data.clip)?;
    trainer.fit(&data, &mut |_, _| Ok(()))?;
    let train_seconds = start.elapsed().as_secs_f64();
    let test: Vec<AnnotatedVideo> = ds.split(Split::Test).cloned().collect();
    let dets = detect_all(&trainer.model, &test, &cfg, 1, None)?;
    let frame = frame_map(&dets, &ground_truth(&test, &cfg.data.clip), 0.5, ds.num_classes()).map;
    let (video, gap_free) = if tubes {
        let linked = link_detections(&dets, ds.num_classes(), &cfg.link)?;
        let gap_free = linked.iter().all(|t| t.tube.is_gap_free() && !t.tube.is_empty());
        let v = video_map(&linked, &ground_truth_tubes(&test, &cfg.data.clip), &[0.5], ds.num_classes());
        (Some(v[0].map), gap_free)
    } else {
        (None, true)
    };
    Ok(Outcome {
        ablation,
        seed,
        frame_map: frame,
        video_map: video,
        gap_free,
        train_seconds,
        seconds: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------- small runs

/// A few short 32×32 videos.
pub fn tiny_dataset(seed: u64) -> Dataset {
    synth_generate(&SynthConfig {
        train_per_class: 3,
        test_per_class: 1,
        frames: 12,
        height: 32,
        width: 32,
        seed,
        ..SynthConfig::default()
    })
    .expect("small synthetic config is valid")
}

/// Narrow widths and 4-frame clips, for fast training-loop tests.
pub fn tiny_run_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.backbone = BackboneConfig {
        widths_2d: vec![4, 8, 8],
        widths_3d: vec![4, 8, 8],
        out_2d: 8,
        out_3d: 8,
        stride: 8,
        clip_len: 4,
        leaky_slope: 0.1,
    };
    cfg.cfam = CfamConfig {
        channels: 8,
        out_channels: 8,
    };
    cfg.data.clip.clip_len = 4;
    cfg.head.num_anchors = 2;
    cfg.train.batch_size = 4;
    cfg.train.max_iters = 20;
    cfg.train.lr = 0.01;
    cfg.eval_batch = 4;
    cfg
}

// ---------------------------------------------------------------- feature bank

fn constant_bank(values: &[f64]) -> FeatureBank<f64> {
    let f = values.iter().map(|&v| Tensor::full(&[2, 1, 2], v)).collect();
    FeatureBank::from_features("v", 8, f).expect("equal shapes")
}

fn all_equal(t: &Tensor<f64>, v: f64) -> bool {
    t.values().iter().all(|&x| x == v)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Averaging by hand, boundary truncation, and bank substitution at inference.
pub fn lfb_suite(seed: u64) -> Check {
    ensure(all_equal(&constant_bank(&[1.5; 6]).query(20, 8).tensor, 1.5), || "mean of equal entries".into())?;
    let pair = constant_bank(&[1.0, 3.0, 9.0]);
    ensure(pair.selection(3, 2) == (0..2), || format!("window 2 selects {:?}", pair.selection(3, 2)))?;
    ensure(all_equal(&pair.query(3, 2).tensor, 2.0), || "mean of 1 and 3".into())?;
    // 3-clip video: every key sees all available clips
    let three = constant_bank(&[1.0, 2.0, 6.0]);
    for key in [0, 7, 8, 20, 23, 40] {
        let q = three.query(key, 8);
        ensure(all_equal(&q.tensor, 3.0), || format!("key {key}: boundary mean {:?}", q.tensor.values()))?;
    }
    ensure(all_equal(&three.query(2, 1).tensor, 1.0) && all_equal(&three.query(17, 1).tensor, 6.0), || "window 1".into())?;
    let five = constant_bank(&[1.0, 2.0, 4.0, 8.0, 16.0]);
    ensure(all_equal(&five.query(0, 3).tensor, 1.5), || "left truncation".into())?;
    ensure(all_equal(&five.query(39, 3).tensor, 12.0), || "right truncation".into())?;
    ensure(all_equal(&five.query(16, 4).tensor, 7.5), || "even window centring".into())?;

    let ds = tiny_dataset(seed);
    let mut video = ds.videos[0].clone();
    video.frames.extend(video.frames[..2].to_vec());
    video.annotations.extend(video.annotations[..2].to_vec());
    let model = Detector::<f64>::new(tiny_spec(Ablation::Full, seed), &mut rng(seed)).map_err(|e| e.to_string())?;
    let d = model.clip_len();
    let bank = build_bank(&video, model.backbone3d.as_ref().expect("full model")).map_err(|e| e.to_string())?;
    ensure(bank.len() == video.num_frames() / d, || format!("{} frames gave {} entries", video.num_frames(), bank.len()))?;
    let again = build_bank(&video, model.backbone3d.as_ref().expect("full model")).map_err(|e| e.to_string())?;
    ensure((0..bank.len()).all(|i| bank.entry(i).values() == again.entry(i).values()), || "rebuild differs".into())?;

    let clip = ClipSpec {
        clip_len: d,
        downsample: 1,
        pad: HistoryPad::Repeat,
    };
    let ends: Vec<usize> = (0..bank.len()).map(|i| i * d + d - 1).collect();
    let grids = |source| raw_grids(&model, &video, &ends, &clip, source, 1).map_err(|e| e.to_string());
    let live = grids(Features3d::Live)?;
    let banked = grids(Features3d::Bank { bank: &bank, window: 1 })?;
    let worst = live.iter().zip(&banked).map(|(a, b)| max_abs_diff(&a.values, &b.values)).fold(0.0, f64::max);
    ensure(worst < 1e-12, || format!("bank of live features changes the output by {worst:e}"))?;

    let mut r = rng(seed ^ 0x1fb);
    let shape = bank.feature_shape().to_vec();
    let fake: Vec<Tensor<f64>> = (0..bank.len()).map(|_| random(&shape, &mut r, -1.0, 1.0)).collect();
    let fake = FeatureBank::from_features(&video.id, d, fake).map_err(|e| e.to_string())?;
    let window = 2;
    let injected = grids(Features3d::Bank { bank: &fake, window })?;
    let mut moved = 0.0f64;
    for ((&k, got), live) in ends.iter().zip(&injected).zip(&live) {
        let expect = no_grad(|| -> actloc::Result<RawGrid> {
            let (_, key) = sample_clip::<f64>(&video, k, &clip)?;
            let ks = key.shape().to_vec();
            let f2d = model.features_2d(&key.reshape(&[1, ks[0], ks[1], ks[2]])?, Mode::Eval)?;
            let q = fake.query(k, window).tensor;
            let f3d = q.reshape(&[1, shape[0], shape[1], shape[2]])?;
            let raw = model.forward_features(f2d.as_ref(), Some(&f3d), Mode::Eval)?;
            RawGrid::from_batch(&raw, 0, model.anchors().len(), model.num_classes())
        })
        .map_err(|e| e.to_string())?;
        let diff = max_abs_diff(&got.values, &expect.values);
        ensure(diff < 1e-12, || format!("key {k}: injected bank differs from direct fusion by {diff:e}"))?;
        moved = moved.max(max_abs_diff(&got.values, &live.values));
    }
    ensure(moved > 1e-6, || "substituting the bank had no effect".into())?;
    Ok(format!(
        "hand means exact; {} entries from {} frames; live-bank max diff {worst:.1e}; injection exact",
        bank.len(),
        video.num_frames()
    ))
}
