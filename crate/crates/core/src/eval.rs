//! Detection metrics: standard AP, fixed AP over per-category prediction
//! pools, and a simplified dense-captioning mAP with token-F1 text matching.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::concepts::normalize_text;
use crate::geometry::{iou, BBox};

/// One scored detection for evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalPrediction {
    pub image_id: String,
    pub bbox: BBox,
    pub category: String,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// One ground-truth object for evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalGroundTruth {
    pub image_id: String,
    pub bbox: BBox,
    pub category: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// Greedy per-image matching of ranked predictions against ground truths:
/// a prediction matches the unmatched GT with the highest IoU at or above
/// the threshold (ties broken by earlier GT index). Returns a TP flag per
/// ranked prediction.
fn greedy_match_flags(
    ranked: &[&EvalPrediction],
    gts: &[&EvalGroundTruth],
    iou_threshold: f64,
    text_threshold: Option<f64>,
) -> Vec<bool> {
    let mut matched = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(ranked.len());
    for p in ranked {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if matched[gi] || g.image_id != p.image_id {
                continue;
            }
            let ov = iou(&p.bbox, &g.bbox);
            if ov < iou_threshold {
                continue;
            }
            if let Some(tt) = text_threshold {
                let f1 = token_f1(
                    p.text.as_deref().unwrap_or(""),
                    g.text.as_deref().unwrap_or(""),
                );
                if f1 < tt {
                    continue;
                }
            }
            match best {
                Some((_, bov)) if ov <= bov => {}
                _ => best = Some((gi, ov)),
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
            flags.push(true);
        } else {
            flags.push(false);
        }
    }
    flags
}

/// Area under the precision envelope (all-point interpolation).
fn ap_from_flags(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        let recall = tp as f64 / n_gt as f64;
        let precision = tp as f64 / (i + 1) as f64;
        points.push((recall, precision));
    }
    // monotone precision envelope from the right
    let mut best = 0.0;
    for p in points.iter_mut().rev() {
        best = best.max(p.1);
        p.1 = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(r, p) in &points {
        if r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    ap
}

/// Rank by descending score, ties by insertion index.
fn rank<'a>(preds: impl Iterator<Item = &'a EvalPrediction>) -> Vec<&'a EvalPrediction> {
    let mut v: Vec<(usize, &EvalPrediction)> = preds.enumerate().collect();
    v.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    v.into_iter().map(|(_, p)| p).collect()
}

/// Mean over categories (with at least one GT) of per-category AP at the
/// given IoU threshold.
pub fn average_precision(
    predictions: &[EvalPrediction],
    gts: &[EvalGroundTruth],
    iou_threshold: f64,
) -> f64 {
    let classes: BTreeSet<&str> = gts.iter().map(|g| g.category.as_str()).collect();
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for class in &classes {
        let ranked = rank(predictions.iter().filter(|p| p.category == *class));
        let class_gts: Vec<&EvalGroundTruth> =
            gts.iter().filter(|g| g.category == *class).collect();
        let flags = greedy_match_flags(&ranked, &class_gts, iou_threshold, None);
        total += ap_from_flags(&flags, class_gts.len());
    }
    total / classes.len() as f64
}

/// Per-category AP result with pool diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixedApReport {
    pub value: f64,
    pub per_category: BTreeMap<String, f64>,
    /// Categories whose pools fell short of `min_dets` candidates.
    pub short_pools: Vec<String>,
}

/// Fixed AP: each category is evaluated over its own cross-image prediction
/// pool, which the inference protocol keeps at `min_dets` or more entries
/// (no per-image caps or score cutoffs). Pools are deduplicated by
/// (image, box, category), keeping the maximum score. `min_dets = 0`
/// degenerates to standard per-category AP over whatever was supplied.
pub fn fixed_ap(
    predictions_by_category: &BTreeMap<String, Vec<EvalPrediction>>,
    gts: &[EvalGroundTruth],
    min_dets: usize,
    iou_threshold: f64,
) -> FixedApReport {
    let classes: BTreeSet<&str> = gts.iter().map(|g| g.category.as_str()).collect();
    let mut per_category = BTreeMap::new();
    let mut short_pools = Vec::new();
    let empty: Vec<EvalPrediction> = Vec::new();
    for class in &classes {
        let pool = predictions_by_category.get(*class).unwrap_or(&empty);
        let deduped = dedup_pool(pool);
        if deduped.len() < min_dets {
            short_pools.push(class.to_string());
        }
        let ranked = rank(deduped.iter());
        let class_gts: Vec<&EvalGroundTruth> =
            gts.iter().filter(|g| g.category == *class).collect();
        let flags = greedy_match_flags(&ranked, &class_gts, iou_threshold, None);
        per_category.insert(class.to_string(), ap_from_flags(&flags, class_gts.len()));
    }
    let value = if per_category.is_empty() {
        0.0
    } else {
        per_category.values().sum::<f64>() / per_category.len() as f64
    };
    FixedApReport { value, per_category, short_pools }
}

/// Deduplicates by (image, box bits, category), keeping the max score.
fn dedup_pool(pool: &[EvalPrediction]) -> Vec<EvalPrediction> {
    let mut best: BTreeMap<(String, [u64; 4], String), EvalPrediction> = BTreeMap::new();
    for p in pool {
        let c = p.bbox.to_corners();
        let key = (
            p.image_id.clone(),
            [
                c[0].to_bits(),
                c[1].to_bits(),
                c[2].to_bits(),
                c[3].to_bits(),
            ],
            p.category.clone(),
        );
        match best.get(&key) {
            Some(prev) if prev.score >= p.score => {}
            _ => {
                best.insert(key, p.clone());
            }
        }
    }
    best.into_values().collect()
}

/// Token-level F1 between two normalized strings (multiset overlap).
/// Two empty strings count as a perfect match.
pub fn token_f1(a: &str, b: &str) -> f64 {
    let na = normalize_text(a);
    let nb = normalize_text(b);
    let ta: Vec<&str> = na.split(' ').filter(|s| !s.is_empty()).collect();
    let tb: Vec<&str> = nb.split(' ').filter(|s| !s.is_empty()).collect();
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for t in &ta {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0i64;
    for t in &tb {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    2.0 * overlap as f64 / (ta.len() + tb.len()) as f64
}

/// Simplified dense-captioning metric: mean over the IoU x text-similarity
/// threshold grid of class-agnostic AP, where a prediction matches a GT only
/// if both thresholds hold.
pub fn dense_caption_map(
    predictions: &[EvalPrediction],
    gts: &[EvalGroundTruth],
    iou_thresholds: &[f64],
    text_thresholds: &[f64],
) -> f64 {
    if iou_thresholds.is_empty() || text_thresholds.is_empty() || gts.is_empty() {
        return 0.0;
    }
    let ranked = rank(predictions.iter());
    let gt_refs: Vec<&EvalGroundTruth> = gts.iter().collect();
    let mut total = 0.0;
    for &ti in iou_thresholds {
        for &tt in text_thresholds {
            let flags = greedy_match_flags(&ranked, &gt_refs, ti, Some(tt));
            total += ap_from_flags(&flags, gts.len());
        }
    }
    total / (iou_thresholds.len() * text_thresholds.len()) as f64
}

pub const DENSE_CAP_IOU_GRID: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
pub const DENSE_CAP_TEXT_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(id: &str, cat: &str, b: [f64; 4]) -> EvalGroundTruth {
        EvalGroundTruth {
            image_id: id.into(),
            bbox: BBox::from_corners(b[0], b[1], b[2], b[3]),
            category: cat.into(),
            text: None,
        }
    }

    fn pred(id: &str, cat: &str, b: [f64; 4], score: f64) -> EvalPrediction {
        EvalPrediction {
            image_id: id.into(),
            bbox: BBox::from_corners(b[0], b[1], b[2], b[3]),
            category: cat.into(),
            score,
            text: None,
        }
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gts = vec![
            gt("a", "x", [0.1, 0.1, 0.4, 0.4]),
            gt("a", "y", [0.5, 0.5, 0.9, 0.9]),
            gt("b", "x", [0.2, 0.2, 0.6, 0.6]),
        ];
        let preds: Vec<EvalPrediction> = gts
            .iter()
            .map(|g| pred(&g.image_id, &g.category, g.bbox.to_corners(), 0.9))
            .collect();
        assert!((average_precision(&preds, &gts, 0.5) - 1.0).abs() < 1e-12);
        assert_eq!(average_precision(&[], &gts, 0.5), 0.0);
    }

    /// Straightforward reference AP: same matching rule, naive envelope.
    fn ap_oracle(preds: &[EvalPrediction], gts: &[EvalGroundTruth], thr: f64) -> f64 {
        let classes: BTreeSet<String> = gts.iter().map(|g| g.category.clone()).collect();
        if classes.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for class in &classes {
            let mut ranked: Vec<(usize, &EvalPrediction)> = preds
                .iter()
                .enumerate()
                .filter(|(_, p)| &p.category == class)
                .collect();
            ranked.sort_by(|a, b| {
                b.1.score
                    .partial_cmp(&a.1.score)
                    .unwrap()
                    .then(a.0.cmp(&b.0))
            });
            let class_gts: Vec<(usize, &EvalGroundTruth)> = gts
                .iter()
                .enumerate()
                .filter(|(_, g)| &g.category == class)
                .collect();
            let n_gt = class_gts.len();
            let mut used = vec![false; n_gt];
            let mut tps = Vec::new();
            for (_, p) in &ranked {
                let mut choice: Option<(usize, f64)> = None;
                for (slot, (_, g)) in class_gts.iter().enumerate() {
                    if used[slot] || g.image_id != p.image_id {
                        continue;
                    }
                    let ov = iou(&p.bbox, &g.bbox);
                    if ov >= thr {
                        let better = match choice {
                            None => true,
                            Some((_, bov)) => ov > bov,
                        };
                        if better {
                            choice = Some((slot, ov));
                        }
                    }
                }
                if let Some((slot, _)) = choice {
                    used[slot] = true;
                    tps.push(true);
                } else {
                    tps.push(false);
                }
            }
            // naive all-point interpolation: for each TP rank position,
            // precision is the max precision at any recall >= that point
            let mut ap = 0.0;
            let mut tp_count = 0;
            for i in 0..tps.len() {
                if !tps[i] {
                    continue;
                }
                tp_count += 1;
                // max precision over positions j >= i
                let mut best = 0.0f64;
                let mut tpj = tp_count;
                for j in i + 1..=tps.len() {
                    let prec = tpj as f64 / j as f64;
                    best = best.max(prec);
                    if j < tps.len() && tps[j] {
                        tpj += 1;
                    }
                }
                ap += best / n_gt as f64;
            }
            total += if n_gt == 0 { 0.0 } else { ap };
        }
        total / classes.len() as f64
    }

    #[test]
    fn matches_reference_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..200 {
            let n_img = rng.gen_range(1..3);
            let cats = ["a", "b"];
            let mut gts = Vec::new();
            for i in 0..rng.gen_range(1..5) {
                let img = format!("img{}", i % n_img);
                let x0: f64 = rng.gen_range(0.0..0.6);
                let y0: f64 = rng.gen_range(0.0..0.6);
                gts.push(gt(
                    &img,
                    cats[rng.gen_range(0..2)],
                    [x0, y0, x0 + rng.gen_range(0.1..0.4), y0 + rng.gen_range(0.1..0.4)],
                ));
            }
            let mut preds = Vec::new();
            for _ in 0..rng.gen_range(0..20) {
                let img = format!("img{}", rng.gen_range(0..n_img));
                let x0: f64 = rng.gen_range(0.0..0.6);
                let y0: f64 = rng.gen_range(0.0..0.6);
                preds.push(pred(
                    &img,
                    cats[rng.gen_range(0..2)],
                    [x0, y0, x0 + rng.gen_range(0.1..0.4), y0 + rng.gen_range(0.1..0.4)],
                    rng.gen_range(0.0..1.0),
                ));
            }
            let got = average_precision(&preds, &gts, 0.5);
            let want = ap_oracle(&preds, &gts, 0.5);
            assert!(
                (got - want).abs() < 1e-9,
                "trial {trial}: got {got} want {want}"
            );
        }
    }

    #[test]
    fn fixed_ap_min_dets_zero_degenerates_to_standard() {
        let gts = vec![
            gt("a", "x", [0.1, 0.1, 0.4, 0.4]),
            gt("a", "y", [0.5, 0.5, 0.9, 0.9]),
        ];
        let preds = vec![
            pred("a", "x", [0.1, 0.1, 0.4, 0.4], 0.8),
            pred("a", "x", [0.5, 0.1, 0.7, 0.4], 0.6),
            pred("a", "y", [0.5, 0.5, 0.9, 0.9], 0.7),
        ];
        let mut by_cat: BTreeMap<String, Vec<EvalPrediction>> = BTreeMap::new();
        for p in &preds {
            by_cat.entry(p.category.clone()).or_default().push(p.clone());
        }
        let fr = fixed_ap(&by_cat, &gts, 0, 0.5);
        let std_ap = average_precision(&preds, &gts, 0.5);
        assert!((fr.value - std_ap).abs() < 1e-12);
        assert!(fr.short_pools.is_empty());
        // raising min_dets flags short pools but never shrinks them
        let fr2 = fixed_ap(&by_cat, &gts, 50, 0.5);
        assert!((fr2.value - fr.value).abs() < 1e-12);
        assert_eq!(fr2.short_pools.len(), 2);
    }

    #[test]
    fn fixed_ap_dedup_keeps_max_score() {
        let gts = vec![gt("a", "x", [0.1, 0.1, 0.4, 0.4])];
        let mut by_cat: BTreeMap<String, Vec<EvalPrediction>> = BTreeMap::new();
        by_cat.insert(
            "x".into(),
            vec![
                pred("a", "x", [0.1, 0.1, 0.4, 0.4], 0.3),
                pred("a", "x", [0.1, 0.1, 0.4, 0.4], 0.9),
                pred("a", "x", [0.6, 0.6, 0.8, 0.8], 0.5),
            ],
        );
        let fr = fixed_ap(&by_cat, &gts, 0, 0.5);
        // duplicate collapses to score 0.9 which ranks first: AP = 1
        assert!((fr.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn token_f1_cases() {
        assert_eq!(token_f1("red square", "red square"), 1.0);
        assert_eq!(token_f1("red square", "blue circle"), 0.0);
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("red", ""), 0.0);
        let f1 = token_f1("small red square", "red square");
        assert!((f1 - 0.8).abs() < 1e-12);
        assert_eq!(token_f1("Red  Square", "red square"), 1.0);
    }

    #[test]
    fn dense_caption_exact_and_disjoint_text() {
        let gts = vec![EvalGroundTruth {
            image_id: "a".into(),
            bbox: BBox::from_corners(0.1, 0.1, 0.5, 0.5),
            category: "obj".into(),
            text: Some("small red square".into()),
        }];
        let exact = vec![EvalPrediction {
            image_id: "a".into(),
            bbox: BBox::from_corners(0.1, 0.1, 0.5, 0.5),
            category: "obj".into(),
            score: 0.9,
            text: Some("small red square".into()),
        }];
        let v = dense_caption_map(&exact, &gts, &DENSE_CAP_IOU_GRID, &DENSE_CAP_TEXT_GRID);
        assert!((v - 1.0).abs() < 1e-12);

        let disjoint = vec![EvalPrediction {
            text: Some("green pipe".into()),
            ..exact[0].clone()
        }];
        let v = dense_caption_map(&disjoint, &gts, &DENSE_CAP_IOU_GRID, &DENSE_CAP_TEXT_GRID);
        // only the five t_text = 0 cells match: 5/25
        assert!((v - 0.2).abs() < 1e-12);
    }

    #[test]
    fn dense_caption_matches_grid_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let texts = ["red square", "blue circle", "green cross"];
            let mut gts = Vec::new();
            for _ in 0..rng.gen_range(1..4) {
                let x0: f64 = rng.gen_range(0.0..0.5);
                let y0: f64 = rng.gen_range(0.0..0.5);
                gts.push(EvalGroundTruth {
                    image_id: "i".into(),
                    bbox: BBox::from_corners(x0, y0, x0 + 0.3, y0 + 0.3),
                    category: "obj".into(),
                    text: Some(texts[rng.gen_range(0..3)].into()),
                });
            }
            let mut preds = Vec::new();
            for _ in 0..rng.gen_range(0..8) {
                let x0: f64 = rng.gen_range(0.0..0.5);
                let y0: f64 = rng.gen_range(0.0..0.5);
                preds.push(EvalPrediction {
                    image_id: "i".into(),
                    bbox: BBox::from_corners(x0, y0, x0 + 0.3, y0 + 0.3),
                    category: "obj".into(),
                    score: rng.gen_range(0.0..1.0),
                    text: Some(texts[rng.gen_range(0..3)].into()),
                });
            }
            let grid_i = [0.3, 0.5];
            let grid_t = [0.0, 0.5, 1.0];
            let got = dense_caption_map(&preds, &gts, &grid_i, &grid_t);
            // per-cell AP computed independently, then the plain mean
            let cell_ap = |ti: f64, tt: f64| -> f64 {
                let mut ranked: Vec<(usize, &EvalPrediction)> = preds.iter().enumerate().collect();
                ranked.sort_by(|a, b| {
                    b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0))
                });
                let mut used = vec![false; gts.len()];
                let mut tps = Vec::new();
                for (_, p) in &ranked {
                    let mut choice: Option<(usize, f64)> = None;
                    for (gi, g) in gts.iter().enumerate() {
                        if used[gi] || g.image_id != p.image_id {
                            continue;
                        }
                        let ov = iou(&p.bbox, &g.bbox);
                        let f1 = token_f1(
                            p.text.as_deref().unwrap_or(""),
                            g.text.as_deref().unwrap_or(""),
                        );
                        if ov >= ti && f1 >= tt && choice.map_or(true, |(_, b)| ov > b) {
                            choice = Some((gi, ov));
                        }
                    }
                    if let Some((gi, _)) = choice {
                        used[gi] = true;
                        tps.push(true);
                    } else {
                        tps.push(false);
                    }
                }
                let n_gt = gts.len();
                let mut ap = 0.0;
                let mut tp_count = 0;
                for i in 0..tps.len() {
                    if !tps[i] {
                        continue;
                    }
                    tp_count += 1;
                    let mut best = 0.0f64;
                    let mut tpj = tp_count;
                    for j in i + 1..=tps.len() {
                        best = best.max(tpj as f64 / j as f64);
                        if j < tps.len() && tps[j] {
                            tpj += 1;
                        }
                    }
                    ap += best / n_gt as f64;
                }
                ap
            };
            let mut acc = 0.0;
            for &ti in &grid_i {
                for &tt in &grid_t {
                    acc += cell_ap(ti, tt);
                }
            }
            let want = acc / 6.0;
            assert!((got - want).abs() < 1e-9, "got {got} want {want}");
        }
    }
}
