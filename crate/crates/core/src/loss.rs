//! Training objectives: box regression, confidence, focal classification.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::head::{sigmoid, AnchorSet, ClassMode, FrameTargets, TCONF, TH, TW, TX, TY};
use crate::tensor::{Real, Tensor};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the detection terms in the final loss.
    pub lambda: f64,
    /// Focusing exponent of the focal loss.
    pub gamma: f64,
    pub coord_scale: f64,
    pub obj_scale: f64,
    pub noobj_scale: f64,
    /// Confidence target is the IoU of the current prediction (true) or 1 (false).
    pub rescore: bool,
    /// Scale class terms by the per-class balance weights.
    pub class_balance: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            gamma: 2.0,
            coord_scale: 5.0,
            obj_scale: 1.0,
            noobj_scale: 0.5,
            rescore: true,
            class_balance: true,
        }
    }
}

/// Loss terms of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub conf: f64,
    pub detection: f64,
    pub class: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "l_x,l_y,l_w,l_h,l_conf,l_d,l_cls,l_final";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.x, self.y, self.w, self.h, self.conf, self.detection, self.class, self.total
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.w, self.h, self.conf, self.detection, self.class, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "x {:.4} y {:.4} w {:.4} h {:.4} conf {:.4} det {:.4} cls {:.4} final {:.4}",
            self.x, self.y, self.w, self.h, self.conf, self.detection, self.class, self.total
        )
    }
}

fn constant<T: Real>(shape: &[usize], v: Vec<f64>) -> Result<Tensor<T>> {
    Tensor::from_f64(shape, &v)
}

/// `Σ smooth_l1(pred − target)` with unit transition point.
pub fn smooth_l1<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(pred.sub(target)?.smooth_l1().sum())
}

/// `Σ wᵢ(xᵢ − yᵢ)²`, unit weights when `weights` is `None`.
pub fn mse_conf<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, weights: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let sq = pred.sub(target)?.square();
    Ok(match weights {
        Some(w) => sq.mul(w)?.sum(),
        None => sq.sum(),
    })
}

/// `−Σ αᵢ[yᵢ(1−xᵢ)^γ log xᵢ + (1−yᵢ)xᵢ^γ log(1−xᵢ)]` with `x` clamped away from 0 and 1.
pub fn focal_loss<T: Real>(prob: &Tensor<T>, labels: &[f64], gamma: f64, alpha: &[f64]) -> Result<Tensor<T>> {
    let n = prob.numel();
    if labels.len() != n || alpha.len() != n {
        return Err(Error::shape(
            "focal_loss",
            format!("{n} probabilities, {} labels, {} weights", labels.len(), alpha.len()),
        ));
    }
    let shape = prob.shape().to_vec();
    let x = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let one_minus = x.neg().add_scalar(1.0);
    let mut terms: Option<Tensor<T>> = None;
    if labels.iter().any(|&y| y != 0.0) {
        let pos = one_minus.powf(gamma)?.mul(&x.log()?)?.mul(&constant(&shape, labels.to_vec())?)?;
        terms = Some(pos);
    }
    if labels.iter().any(|&y| y != 1.0) {
        let neg_labels: Vec<f64> = labels.iter().map(|y| 1.0 - y).collect();
        let neg = x.powf(gamma)?.mul(&one_minus.log()?)?.mul(&constant(&shape, neg_labels)?)?;
        terms = Some(match terms {
            Some(t) => t.add(&neg)?,
            None => neg,
        });
    }
    let terms = terms.expect("labels are non-empty");
    Ok(terms.mul(&constant(&shape, alpha.to_vec())?)?.sum().neg())
}

/// `α_c = exp(−n_c / Σn)`.
pub fn balance_weights(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("class counts sum to zero"));
    }
    Ok(counts.iter().map(|&n| (-(n as f64) / total as f64).exp()).collect())
}

/// Per-row class targets for [`classification_loss`].
#[derive(Debug, Clone, PartialEq)]
pub enum ClassTargets {
    /// One class id per row.
    Single(Vec<usize>),
    /// A multi-hot row per slot; the pose group must be one-hot.
    Multi(Vec<Vec<f64>>),
}

/// Focal classification loss over `logits: [R×NumCls]`.
pub fn classification_loss<T: Real>(
    logits: &Tensor<T>,
    targets: &ClassTargets,
    mode: ClassMode,
    gamma: f64,
    weights: &[f64],
) -> Result<Tensor<T>> {
    let (rows, classes) = match logits.shape() {
        &[r, c] => (r, c),
        s => return Err(Error::shape("classification_loss", format!("expected [R,C], got {s:?}"))),
    };
    if weights.len() != classes {
        return Err(Error::shape(
            "classification_loss",
            format!("{} class weights for {classes} classes", weights.len()),
        ));
    }
    match (mode, targets) {
        (ClassMode::Single, ClassTargets::Single(ids)) => {
            if ids.len() != rows || ids.iter().any(|&c| c >= classes) {
                return Err(Error::invalid(format!("class targets {ids:?} for {rows} rows of {classes} classes")));
            }
            let mut onehot = vec![0.0; rows * classes];
            for (r, &c) in ids.iter().enumerate() {
                onehot[r * classes + c] = 1.0;
            }
            let p = logits
                .softmax_rows()?
                .mul(&constant(&[rows, classes], onehot)?)?
                .sum_axis(1)?;
            let alpha: Vec<f64> = ids.iter().map(|&c| weights[c]).collect();
            focal_loss(&p, &vec![1.0; rows], gamma, &alpha)
        }
        (ClassMode::Multi { pose }, ClassTargets::Multi(hot)) => {
            if pose == 0 || pose > classes {
                return Err(Error::invalid(format!("pose group size {pose} for {classes} classes")));
            }
            if hot.len() != rows || hot.iter().any(|r| r.len() != classes) {
                return Err(Error::shape("classification_loss", "multi-hot targets do not match the logits"));
            }
            let mut pose_ids = Vec::with_capacity(rows);
            for (r, row) in hot.iter().enumerate() {
                let ones: Vec<usize> = (0..pose).filter(|&c| row[c] == 1.0).collect();
                if ones.len() != 1 || row[..pose].iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::invalid(format!("row {r}: pose target {:?} is not one-hot", &row[..pose])));
                }
                pose_ids.push(ones[0]);
            }
            let pose_logits = logits.narrow(1, 0, pose)?;
            let mut loss = classification_loss(
                &pose_logits,
                &ClassTargets::Single(pose_ids),
                ClassMode::Single,
                gamma,
                &weights[..pose],
            )?;
            let inter = classes - pose;
            if inter > 0 {
                let probs = logits.narrow(1, pose, inter)?.sigmoid();
                let labels: Vec<f64> = hot.iter().flat_map(|r| r[pose..].to_vec()).collect();
                let alpha: Vec<f64> = (0..rows).flat_map(|_| weights[pose..].to_vec()).collect();
                loss = loss.add(&focal_loss(&probs, &labels, gamma, &alpha)?)?;
            }
            Ok(loss)
        }
        _ => Err(Error::invalid("class targets do not match the class mode")),
    }
}

/// `λ·L_D + L_cls`.
pub fn total_loss<T: Real>(detection: &Tensor<T>, class: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    detection.scale(lambda).add(class)
}

/// Full objective over a batched head output `[N×k(5+NumCls)×H'×W']`.
///
/// Every term is summed over its slots and divided by the batch size.
pub fn detection_loss<T: Real>(
    raw: &Tensor<T>,
    targets: &[FrameTargets],
    anchors: &AnchorSet,
    num_classes: usize,
    class_weights: &[f64],
    cfg: &LossConfig,
) -> Result<(Tensor<T>, LossReport)> {
    let s = raw.shape().to_vec();
    let k = anchors.len();
    let per = 5 + num_classes;
    if s.len() != 4 || s[1] != k * per || targets.len() != s[0] {
        return Err(Error::shape(
            "detection_loss",
            format!("raw {s:?}, {} target frames, {k} anchors, {num_classes} classes", targets.len()),
        ));
    }
    let (n, gh, gw) = (s[0], s[2], s[3]);
    let slots = k * gh * gw;
    let rows = raw
        .reshape(&[n, k, per, gh, gw])?
        .permute(&[0, 1, 3, 4, 2])?
        .reshape(&[n * slots, per])?;
    let vals = rows.values();
    let at = |r: usize, j: usize| vals[r * per + j].f64();

    let mut resp = Vec::new();
    let mut xy_t = Vec::new();
    let mut wh_t = Vec::new();
    let mut cls_t = Vec::new();
    let mut conf_t = vec![0.0; n * slots];
    let mut conf_w = vec![cfg.noobj_scale; n * slots];
    for (i, ft) in targets.iter().enumerate() {
        if ft.num_slots != slots {
            return Err(Error::shape(
                "detection_loss",
                format!("frame {i} targets have {} slots, grid has {slots}", ft.num_slots),
            ));
        }
        for a in &ft.assignments {
            if a.class >= num_classes {
                return Err(Error::invalid(format!("class {} out of range for {num_classes} classes", a.class)));
            }
            let r = i * slots + a.slot;
            resp.push(r);
            xy_t.extend([a.offset.0, a.offset.1]);
            wh_t.extend([a.log_scale.0, a.log_scale.1]);
            cls_t.push(a.class);
            let target = if cfg.rescore {
                let (aw, ah) = anchors.get(a.anchor);
                let cx = (sigmoid(at(r, TX)) + a.cell.0 as f64) / gw as f64;
                let cy = (sigmoid(at(r, TY)) + a.cell.1 as f64) / gh as f64;
                let w = aw * at(r, TW).exp() / gw as f64;
                let h = ah * at(r, TH).exp() / gh as f64;
                let p = BBox::from_center(cx, cy, w, h);
                if p.is_finite() {
                    p.iou(&a.bbox)
                } else {
                    0.0
                }
            } else {
                1.0
            };
            conf_t[r] = target;
            conf_w[r] = cfg.obj_scale;
        }
    }

    let inv_n = 1.0 / n as f64;
    let zero = || Tensor::<T>::zeros(&[1]);
    let (lx, ly, lw, lh, lcls) = if resp.is_empty() {
        (zero(), zero(), zero(), zero(), zero())
    } else {
        let m = resp.len();
        let sel = rows.select_rows(&resp)?;
        let xy = sel.narrow(1, 0, 2)?.sigmoid().sub(&constant(&[m, 2], xy_t)?)?.smooth_l1();
        let wh = sel.narrow(1, 2, 2)?.sub(&constant(&[m, 2], wh_t)?)?.smooth_l1();
        let c = cfg.coord_scale * inv_n;
        let weights: Vec<f64> = if cfg.class_balance {
            class_weights.to_vec()
        } else {
            vec![1.0; num_classes]
        };
        let mode = ClassMode::Single;
        let cls = classification_loss(
            &sel.narrow(1, 5, num_classes)?,
            &ClassTargets::Single(cls_t),
            mode,
            cfg.gamma,
            &weights,
        )?;
        (
            xy.narrow(1, 0, 1)?.sum().scale(c),
            xy.narrow(1, 1, 1)?.sum().scale(c),
            wh.narrow(1, 0, 1)?.sum().scale(c),
            wh.narrow(1, 1, 1)?.sum().scale(c),
            cls.scale(inv_n),
        )
    };
    let conf_pred = rows.narrow(1, TCONF, 1)?.sigmoid();
    let shape = conf_pred.shape().to_vec();
    let lconf = mse_conf(&conf_pred, &constant(&shape, conf_t)?, Some(&constant(&shape, conf_w)?))?.scale(inv_n);
    let det = lx.add(&ly)?.add(&lw)?.add(&lh)?.add(&lconf)?;
    let total = total_loss(&det, &lcls, cfg.lambda)?;
    let report = LossReport {
        x: lx.item(),
        y: ly.item(),
        w: lw.item(),
        h: lh.item(),
        conf: lconf.item(),
        detection: det.item(),
        class: lcls.item(),
        total: total.item(),
    };
    Ok((total, report))
}
