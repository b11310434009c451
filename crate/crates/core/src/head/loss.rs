//! Training losses of the center head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::head::boxes::BBox;

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_GAMMA: f64 = 4.0;
const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    pub lambda_sim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_iou: 2.0, lambda_l1: 5.0, lambda_sim: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("lambda_iou", self.lambda_iou), ("lambda_l1", self.lambda_l1), ("lambda_sim", self.lambda_sim)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config { key: format!("train.loss.{k}"), detail: format!("must be finite and >= 0, got {v}") });
            }
        }
        Ok(())
    }
}

/// Radius (in cells) of the Gaussian splat for a `w × h` box, chosen so a
/// corner-shifted box still overlaps the target with IoU ≥ 0.7.
pub fn gaussian_radius(w: f64, h: f64) -> f64 {
    let min_overlap = 0.7;
    let b1 = h + w;
    let c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - min_overlap) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;
    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (h + w);
    let c3 = (min_overlap - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3).max(0.0)
}

/// `side × side` target with a unit peak at `(x, y)` and a Gaussian falloff
/// sized from the box extent in cells.
pub fn gaussian_target(side: usize, x: usize, y: usize, w_cells: f64, h_cells: f64) -> Tensor {
    let r = gaussian_radius(w_cells, h_cells).floor().max(0.0);
    let sigma = (2.0 * r + 1.0) / 6.0;
    Tensor::from_fn([side, side], |i| {
        let (gy, gx) = ((i / side) as f64 - y as f64, (i % side) as f64 - x as f64);
        if gx.abs() > r || gy.abs() > r {
            return 0.0;
        }
        (-(gx * gx + gy * gy) / (2.0 * sigma * sigma)).exp()
    })
}

/// Penalty-reduced focal loss, summed over the map and divided by the
/// number of peaks (`target == 1`). `p` and `target` share a shape whose
/// leading axis is the batch.
pub fn focal_loss(tape: &mut Tape, p: Var, target: &Tensor) -> Result<Var> {
    if tape.shape(p) != target.shape() {
        return Err(Error::shape("focal_loss", format!("P {:?} vs target {:?}", tape.shape(p), target.shape())));
    }
    let batch = target.shape().first().copied().unwrap_or(1).max(1);
    let per = target.numel() / batch;
    for b in 0..batch {
        if !target.data()[b * per..(b + 1) * per].iter().any(|&t| t == 1.0) {
            return Err(Error::invalid(format!("focal target of sample {b} has no peak")));
        }
    }
    if target.data().iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::invalid("focal target outside [0, 1]"));
    }
    let npos = target.data().iter().filter(|&&t| t == 1.0).count() as f64;
    let pos_mask: Vec<f64> = target.data().iter().map(|&t| if t == 1.0 { 1.0 } else { 0.0 }).collect();
    let neg_w: Vec<f64> = target.data().iter().map(|&t| if t == 1.0 { 0.0 } else { (1.0 - t).powf(FOCAL_GAMMA) }).collect();
    let shape = target.shape().to_vec();
    let pos_mask = tape.constant(Tensor::new(shape.clone(), pos_mask)?);
    let neg_w = tape.constant(Tensor::new(shape, neg_w)?);

    let pc = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let one_minus = tape.neg(pc);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let log_p = tape.log(pc);
    let log_q = tape.log(one_minus);
    // positives: (1 − p)^α · log p
    let q2 = tape.square(one_minus);
    let pos = tape.mul(q2, log_p)?;
    let pos = tape.mul(pos, pos_mask)?;
    // negatives: (1 − t)^γ · p^α · log(1 − p)
    let p2 = tape.square(pc);
    let neg = tape.mul(p2, log_q)?;
    let neg = tape.mul(neg, neg_w)?;
    let all = tape.add(pos, neg)?;
    let s = tape.sum(all);
    Ok(tape.scale(s, -1.0 / npos))
}

fn col(tape: &mut Tape, boxes: Var, i: usize) -> Result<Var> {
    tape.narrow(boxes, 1, i, 1)
}

/// Corner coordinates `(x0, y0, x1, y1)` of `[B, 4]` centre-size boxes.
fn corners(tape: &mut Tape, boxes: Var) -> Result<[Var; 4]> {
    let cx = col(tape, boxes, 0)?;
    let cy = col(tape, boxes, 1)?;
    let w = col(tape, boxes, 2)?;
    let h = col(tape, boxes, 3)?;
    let hw = tape.scale(w, 0.5);
    let hh = tape.scale(h, 0.5);
    Ok([tape.sub(cx, hw)?, tape.sub(cy, hh)?, tape.add(cx, hw)?, tape.add(cy, hh)?])
}

pub fn boxes_tensor(boxes: &[BBox]) -> Tensor {
    Tensor::new([boxes.len(), 4], boxes.iter().flat_map(|b| [b.cx, b.cy, b.w, b.h]).collect()).expect("[B, 4]")
}

/// Mean of `1 − GIoU` over `[B, 4]` centre-size boxes.
pub fn giou_loss(tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var> {
    let ps = tape.shape(pred).to_vec();
    if ps.len() != 2 || ps[1] != 4 || gt.shape() != ps.as_slice() {
        return Err(Error::shape("giou_loss", format!("pred {:?} vs gt {:?}, expected [B, 4]", ps, gt.shape())));
    }
    let pv = tape.value(pred);
    for (name, t) in [("prediction", pv), ("ground truth", gt)] {
        if t.data().chunks(4).any(|r| !(r[2] > 0.0 && r[3] > 0.0)) {
            return Err(Error::invalid(format!("degenerate {name} box in giou_loss")));
        }
    }
    let g = tape.constant(gt.clone());
    let [a0, a1, a2, a3] = corners(tape, pred)?;
    let [b0, b1, b2, b3] = corners(tape, g)?;
    let area = |tape: &mut Tape, x0, y0, x1, y1| -> Result<Var> {
        let w = tape.sub(x1, x0)?;
        let h = tape.sub(y1, y0)?;
        tape.mul(w, h)
    };
    let ix0 = tape.maximum(a0, b0)?;
    let iy0 = tape.maximum(a1, b1)?;
    let ix1 = tape.minimum(a2, b2)?;
    let iy1 = tape.minimum(a3, b3)?;
    let iw = tape.sub(ix1, ix0)?;
    let iw = tape.relu(iw);
    let ih = tape.sub(iy1, iy0)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;
    let area_a = area(tape, a0, a1, a2, a3)?;
    let area_b = area(tape, b0, b1, b2, b3)?;
    let sum = tape.add(area_a, area_b)?;
    let union = tape.sub(sum, inter)?;
    let iou = tape.div(inter, union)?;
    let cx0 = tape.minimum(a0, b0)?;
    let cy0 = tape.minimum(a1, b1)?;
    let cx1 = tape.maximum(a2, b2)?;
    let cy1 = tape.maximum(a3, b3)?;
    let c = area(tape, cx0, cy0, cx1, cy1)?;
    let gap = tape.sub(c, union)?;
    let frac = tape.div(gap, c)?;
    let giou = tape.sub(iou, frac)?;
    let m = tape.mean(giou);
    let neg = tape.neg(m);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Mean absolute error of `[B, 4]` boxes after dividing by `(W, H, W, H)`.
pub fn l1_loss(tape: &mut Tape, pred: Var, gt: &Tensor, width: f64, height: f64) -> Result<Var> {
    if tape.shape(pred) != gt.shape() {
        return Err(Error::shape("l1_loss", format!("pred {:?} vs gt {:?}", tape.shape(pred), gt.shape())));
    }
    let norm = tape.constant(Tensor::new([4], vec![1.0 / width, 1.0 / height, 1.0 / width, 1.0 / height])?);
    let g = tape.constant(gt.clone());
    let d = tape.sub(pred, g)?;
    let d = tape.mul(d, norm)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// Mean over rows of `1 − cos(a_i, b_i)` for `[B, D]` features.
pub fn similarity_loss(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa != sb || sa.len() != 2 {
        return Err(Error::shape("similarity_loss", format!("{sa:?} vs {sb:?}, expected matching [B, D]")));
    }
    for v in [a, b] {
        if tape.value(v).data().chunks(sa[1]).any(|r| r.iter().all(|&x| x == 0.0)) {
            return Err(Error::invalid("similarity_loss of a zero vector"));
        }
    }
    let ab = tape.mul(a, b)?;
    let dot = tape.sum_axis(ab, 1)?;
    let a2 = tape.square(a);
    let na = tape.sum_axis(a2, 1)?;
    let b2 = tape.square(b);
    let nb = tape.sum_axis(b2, 1)?;
    let nn = tape.mul(na, nb)?;
    let nn = tape.sqrt(nn);
    let cos = tape.div(dot, nn)?;
    let m = tape.mean(cos);
    let neg = tape.neg(m);
    Ok(tape.add_scalar(neg, 1.0))
}

/// The individual loss terms of one step. `mi` already carries `λ_MI`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cls: Var,
    pub giou: Var,
    pub l1: Var,
    pub sim: Option<Var>,
    pub mi: Option<Var>,
}

/// `L_cls + λ_iou·L_giou + λ_L1·L_1 + λ_sim·L_sim + L_MI`.
pub fn total_loss(tape: &mut Tape, t: &LossTerms, w: &LossWeights) -> Result<Var> {
    let g = tape.scale(t.giou, w.lambda_iou);
    let l = tape.scale(t.l1, w.lambda_l1);
    let mut total = tape.add(t.cls, g)?;
    total = tape.add(total, l)?;
    if let Some(s) = t.sim {
        let s = tape.scale(s, w.lambda_sim);
        total = tape.add(total, s)?;
    }
    if let Some(m) = t.mi {
        total = tape.add(total, m)?;
    }
    Ok(total)
}
