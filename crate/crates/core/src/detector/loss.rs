//! Detection losses: contrastive focal alignment over the query/concept
//! grid, L1 and GIoU box regression, and the per-layer composition with
//! auxiliary encoder supervision.

use crate::autodiff::Var;
use crate::detector::matching::{hungarian_match, CostWeights};
use crate::geometry::BBox;
use crate::nn::Session;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub align: f64,
    pub l1: f64,
    pub iou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { align: 1.0, l1: 5.0, iou: 2.0, focal_alpha: 0.25, focal_gamma: 2.0 }
    }
}

/// Sigmoid focal loss over a `Q x C` logit grid with a 0/1 positive map,
/// normalized by the number of positives (at least 1).
///
/// Uses the softplus formulation, stable at large magnitudes:
/// positives contribute `alpha * e^{-gamma*sp(x)} * sp(-x)`,
/// negatives `(1-alpha) * e^{-gamma*sp(-x)} * sp(x)`.
pub fn contrastive_focal_loss(
    sess: &mut Session,
    logits: Var,
    positive_map: &[bool],
    alpha: f64,
    gamma: f64,
) -> Var {
    let shape = sess.g.value(logits).shape().to_vec();
    let n = sess.g.value(logits).len();
    assert_eq!(positive_map.len(), n, "positive map size mismatch");
    let n_pos = positive_map.iter().filter(|&&b| b).count().max(1) as f64;
    let mut pos_mask = Tensor::zeros(shape.clone());
    let mut neg_mask = Tensor::zeros(shape);
    for i in 0..n {
        if positive_map[i] {
            pos_mask.data_mut()[i] = 1.0;
        } else {
            neg_mask.data_mut()[i] = 1.0;
        }
    }
    let sp_x = sess.g.softplus(logits);
    let neg_logits = sess.g.neg(logits);
    let sp_nx = sess.g.softplus(neg_logits);

    let damp_pos = sess.g.mul_scalar(sp_x, -gamma);
    let damp_pos = sess.g.exp(damp_pos);
    let pos_term = sess.g.mul(damp_pos, sp_nx);
    let pos_term = sess.g.mul_scalar(pos_term, alpha);
    let pos_term = sess.g.mul_const(pos_term, pos_mask);

    let damp_neg = sess.g.mul_scalar(sp_nx, -gamma);
    let damp_neg = sess.g.exp(damp_neg);
    let neg_term = sess.g.mul(damp_neg, sp_x);
    let neg_term = sess.g.mul_scalar(neg_term, 1.0 - alpha);
    let neg_term = sess.g.mul_const(neg_term, neg_mask);

    let total = sess.g.add(pos_term, neg_term);
    let total = sess.g.sum_all(total);
    sess.g.mul_scalar(total, 1.0 / n_pos)
}

/// Splits a `[N, 4]` center-form box variable into its four column vectors.
fn box_columns(sess: &mut Session, boxes: Var) -> (Var, Var, Var, Var) {
    let cx = sess.g.slice_cols(boxes, 0, 1);
    let cy = sess.g.slice_cols(boxes, 1, 2);
    let w = sess.g.slice_cols(boxes, 2, 3);
    let h = sess.g.slice_cols(boxes, 3, 4);
    (cx, cy, w, h)
}

fn to_corners(sess: &mut Session, boxes: Var) -> (Var, Var, Var, Var) {
    let (cx, cy, w, h) = box_columns(sess, boxes);
    let hw = sess.g.mul_scalar(w, 0.5);
    let hh = sess.g.mul_scalar(h, 0.5);
    let x0 = sess.g.sub(cx, hw);
    let x1 = sess.g.add(cx, hw);
    let y0 = sess.g.sub(cy, hh);
    let y1 = sess.g.add(cy, hh);
    (x0, y0, x1, y1)
}

/// Differentiable L1 loss between `[N, 4]` center-form predictions and
/// constant targets, summed over components, averaged over boxes.
pub fn l1_loss_var(sess: &mut Session, pred: Var, target: &Tensor) -> Var {
    let n = sess.g.value(pred).rows().max(1) as f64;
    let t = sess.g.constant(target.clone());
    let d = sess.g.sub(pred, t);
    let d = sess.g.abs(d);
    let s = sess.g.sum_all(d);
    sess.g.mul_scalar(s, 1.0 / n)
}

/// Differentiable GIoU loss, `mean(1 - giou)`, pred in center form, target a
/// constant `[N, 4]` center-form tensor.
pub fn giou_loss_var(sess: &mut Session, pred: Var, target: &Tensor) -> Var {
    let n = sess.g.value(pred).rows().max(1) as f64;
    let t = sess.g.constant(target.clone());
    let (ax0, ay0, ax1, ay1) = to_corners(sess, pred);
    let (bx0, by0, bx1, by1) = to_corners(sess, t);

    let ix0 = sess.g.max_elem(ax0, bx0);
    let iy0 = sess.g.max_elem(ay0, by0);
    let ix1 = sess.g.min_elem(ax1, bx1);
    let iy1 = sess.g.min_elem(ay1, by1);
    let iw = sess.g.sub(ix1, ix0);
    let iw = sess.g.relu(iw);
    let ih = sess.g.sub(iy1, iy0);
    let ih = sess.g.relu(ih);
    let inter = sess.g.mul(iw, ih);

    let aw = sess.g.sub(ax1, ax0);
    let ah = sess.g.sub(ay1, ay0);
    let area_a = sess.g.mul(aw, ah);
    let bw = sess.g.sub(bx1, bx0);
    let bh = sess.g.sub(by1, by0);
    let area_b = sess.g.mul(bw, bh);
    let union = sess.g.add(area_a, area_b);
    let union = sess.g.sub(union, inter);
    let iou = sess.g.div(inter, union);

    let ex0 = sess.g.min_elem(ax0, bx0);
    let ey0 = sess.g.min_elem(ay0, by0);
    let ex1 = sess.g.max_elem(ax1, bx1);
    let ey1 = sess.g.max_elem(ay1, by1);
    let ew = sess.g.sub(ex1, ex0);
    let eh = sess.g.sub(ey1, ey0);
    let enclose = sess.g.mul(ew, eh);
    let floor = {
        let rows = sess.g.value(enclose).rows();
        sess.g.constant(Tensor::full(vec![rows, 1], 1e-12))
    };
    let enclose = sess.g.max_elem(enclose, floor);

    let gap = sess.g.sub(enclose, union);
    let gap = sess.g.div(gap, enclose);
    let giou = sess.g.sub(iou, gap);
    let s = sess.g.sum_all(giou);
    let s = sess.g.mul_scalar(s, -1.0 / n);
    sess.g.add_scalar(s, 1.0)
}

/// One sample's detection targets: boxes plus their concept column indices.
#[derive(Clone, Debug, Default)]
pub struct DetectionTargets {
    pub boxes: Vec<BBox>,
    pub concept_indices: Vec<usize>,
}

/// Per-term values of a computed detection loss (already weighted).
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub align: f64,
    pub l1: f64,
    pub iou: f64,
    pub total: f64,
}

/// Matched loss for one prediction layer. Matching runs on current values;
/// gradients flow through the loss terms only.
pub fn layer_loss(
    sess: &mut Session,
    boxes: Var,
    logits: Var,
    targets: &DetectionTargets,
    weights: &LossWeights,
    cost: &CostWeights,
    breakdown: &mut LossBreakdown,
) -> Var {
    let k = sess.g.value(boxes).rows();
    let c = sess.g.value(logits).cols();
    let pred_boxes: Vec<BBox> = (0..k)
        .map(|q| {
            let r = sess.g.value(boxes).row(q);
            BBox::from_center(r[0], r[1], r[2], r[3])
        })
        .collect();
    let assignment = hungarian_match(
        &pred_boxes,
        sess.g.value(logits),
        &targets.boxes,
        &targets.concept_indices,
        cost,
    )
    .expect("layer_loss requires queries >= ground truths");

    let mut positive_map = vec![false; k * c];
    for &(gi, qi) in &assignment {
        positive_map[qi * c + targets.concept_indices[gi]] = true;
    }
    let align = contrastive_focal_loss(
        sess,
        logits,
        &positive_map,
        weights.focal_alpha,
        weights.focal_gamma,
    );
    let align = sess.g.mul_scalar(align, weights.align);

    let (l1, iou) = if assignment.is_empty() {
        (sess.g.scalar(0.0), sess.g.scalar(0.0))
    } else {
        let q_idx: Vec<usize> = assignment.iter().map(|&(_, q)| q).collect();
        let matched = sess.g.select_rows(boxes, &q_idx);
        let gt_rows: Vec<Vec<f64>> = assignment
            .iter()
            .map(|&(gi, _)| targets.boxes[gi].to_center().to_vec())
            .collect();
        let gt = Tensor::from_rows(&gt_rows);
        let l1 = l1_loss_var(sess, matched, &gt);
        let l1 = sess.g.mul_scalar(l1, weights.l1);
        let iou = giou_loss_var(sess, matched, &gt);
        let iou = sess.g.mul_scalar(iou, weights.iou);
        (l1, iou)
    };
    breakdown.align += sess.g.value(align).item();
    breakdown.l1 += sess.g.value(l1).item();
    breakdown.iou += sess.g.value(iou).item();
    let s = sess.g.add(align, l1);
    sess.g.add(s, iou)
}

/// Full detection loss: per-layer matched losses summed over decoder layers
/// plus the encoder-output auxiliary term.
pub fn detection_loss(
    sess: &mut Session,
    layer_boxes: &[Var],
    layer_logits: &[Var],
    encoder_output: Option<(Var, Var)>,
    targets: &DetectionTargets,
    weights: &LossWeights,
    cost: &CostWeights,
) -> (Var, LossBreakdown) {
    assert_eq!(layer_boxes.len(), layer_logits.len());
    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Var> = None;
    for (&b, &l) in layer_boxes.iter().zip(layer_logits.iter()) {
        let ll = layer_loss(sess, b, l, targets, weights, cost, &mut breakdown);
        total = Some(match total {
            Some(t) => sess.g.add(t, ll),
            None => ll,
        });
    }
    if let Some((enc_boxes, enc_logits)) = encoder_output {
        let ll = layer_loss(sess, enc_boxes, enc_logits, targets, weights, cost, &mut breakdown);
        total = Some(match total {
            Some(t) => sess.g.add(t, ll),
            None => ll,
        });
    }
    let total = total.expect("detection loss needs at least one layer");
    breakdown.total = sess.g.value(total).item();
    (total, breakdown)
}
