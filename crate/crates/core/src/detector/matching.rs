//! Hungarian (minimum-cost bipartite) matching between predictions and
//! ground truths, with the DETR-style focal/L1/GIoU matching cost.

use crate::error::{Error, Result};
use crate::geometry::{giou, l1_box_loss, BBox};
use crate::tensor::{sigmoid, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct CostWeights {
    pub align: f64,
    pub l1: f64,
    pub iou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights { align: 2.0, l1: 5.0, iou: 2.0, focal_alpha: 0.25, focal_gamma: 2.0 }
    }
}

/// Focal-style classification cost for one predicted probability.
fn focal_cost(p: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(1e-8, 1.0 - 1e-8);
    let pos = alpha * (1.0 - p).powf(gamma) * (-p.ln());
    let neg = (1.0 - alpha) * p.powf(gamma) * (-(1.0 - p).ln());
    pos - neg
}

/// Builds the `[n_gt, n_query]` matching cost matrix.
pub fn matching_costs(
    pred_boxes: &[BBox],
    pred_logits: &Tensor,
    gt_boxes: &[BBox],
    gt_concept_indices: &[usize],
    w: &CostWeights,
) -> Tensor {
    let k = pred_boxes.len();
    let n = gt_boxes.len();
    assert_eq!(pred_logits.rows(), k);
    assert_eq!(gt_concept_indices.len(), n);
    let mut cost = Tensor::zeros(vec![n, k]);
    for (gi, (gb, &gc)) in gt_boxes.iter().zip(gt_concept_indices).enumerate() {
        for (qi, pb) in pred_boxes.iter().enumerate() {
            let p = sigmoid(pred_logits.at2(qi, gc));
            let c = w.align * focal_cost(p, w.focal_alpha, w.focal_gamma)
                + w.l1 * l1_box_loss(pb, gb)
                + w.iou * (1.0 - giou(pb, gb));
            cost.data_mut()[gi * k + qi] = c;
        }
    }
    cost
}

/// Minimum-total-cost one-to-one assignment of rows (ground truths) to
/// columns (queries). Returns `(gt_index, query_index)` pairs sorted by
/// ground-truth index. Requires `n_rows <= n_cols`.
pub fn solve_assignment(cost: &Tensor) -> Result<Vec<(usize, usize)>> {
    let n = cost.rows();
    let m = cost.cols();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n > m {
        return Err(Error::MatchSizing { queries: m, truths: n });
    }
    // shortest augmenting path with potentials, 1-indexed
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1]; // column -> row
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.at2(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = Vec::with_capacity(n);
    for j in 1..=m {
        if p[j] != 0 {
            out.push((p[j] - 1, j - 1));
        }
    }
    out.sort_by_key(|&(gi, _)| gi);
    Ok(out)
}

/// The full matching operation: builds costs, then solves the assignment.
pub fn hungarian_match(
    pred_boxes: &[BBox],
    pred_logits: &Tensor,
    gt_boxes: &[BBox],
    gt_concept_indices: &[usize],
    weights: &CostWeights,
) -> Result<Vec<(usize, usize)>> {
    let cost = matching_costs(pred_boxes, pred_logits, gt_boxes, gt_concept_indices, weights);
    solve_assignment(&cost)
}

/// Total cost of an assignment against a cost matrix (test/oracle helper).
pub fn assignment_cost(cost: &Tensor, assignment: &[(usize, usize)]) -> f64 {
    assignment.iter().map(|&(r, c)| cost.at2(r, c)).sum()
}
