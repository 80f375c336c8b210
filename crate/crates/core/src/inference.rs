//! Inference protocols: chunked open-vocabulary detection, generative
//! detection with foreground selection and objectness re-calibration, and
//! taxonomy mapping for zero-shot generative evaluation.

use serde::{Deserialize, Serialize};

use crate::captioner::{generate, recalibrate_objectness, GeneratedLabel};
use crate::concepts::{top_frequent, ConceptRecord, NounCorpus};
use crate::geometry::{class_agnostic_nms, BBox};
use crate::model::{DetectSnapshot, Model};
use crate::tensor::Tensor;
use crate::text_encoder::OBJ;

/// One category-mode detection.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub category_index: usize,
    pub category: String,
    pub score: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct DetectOptions {
    pub chunk_size: usize,
    pub retain_top: usize,
    pub score_threshold: f64,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions { chunk_size: 40, retain_top: 300, score_threshold: 0.0 }
    }
}

pub fn chunk_count(n_categories: usize, chunk_size: usize) -> usize {
    n_categories.div_ceil(chunk_size)
}

/// Category-conditioned detection. The visual pass and query selection run
/// once over the full category list (there is no cross-modal fusion, so
/// per-(box, concept) scores are independent of chunk composition); the
/// categories are then scored in chunks of `chunk_size`, keeping the top
/// `retain_top` predictions per chunk.
pub fn detect(
    model: &Model,
    image: &image::RgbImage,
    image_id: &str,
    categories: &[ConceptRecord],
    opts: &DetectOptions,
) -> Vec<Prediction> {
    assert!(!categories.is_empty(), "detect needs at least one category");
    let embeds = model.encode_concept_records(categories);
    let snapshot = model.detect_snapshot(image, &embeds);
    let mut out = Vec::new();
    let c = categories.len();
    let mut start = 0;
    while start < c {
        let end = (start + opts.chunk_size).min(c);
        let chunk = chunk_scores(model, &snapshot, &embeds, start, end);
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (q, row) in chunk.iter().enumerate() {
            for (j, &s) in row.iter().enumerate() {
                entries.push((q, start + j, s));
            }
        }
        entries.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        entries.truncate(opts.retain_top);
        for (q, cat, s) in entries {
            if s >= opts.score_threshold {
                out.push(Prediction {
                    image_id: image_id.to_string(),
                    bbox: snapshot.boxes[q].to_corners(),
                    category_index: cat,
                    category: categories[cat].text.clone(),
                    score: s,
                });
            }
        }
        start = end;
    }
    out
}

/// Per-(query, concept) sigmoid scores for one contiguous category chunk.
/// Each score is an independent dot product, so chunked and unchunked runs
/// agree bitwise.
fn chunk_scores(
    model: &Model,
    snapshot: &DetectSnapshot,
    embeds: &Tensor,
    start: usize,
    end: usize,
) -> Vec<Vec<f64>> {
    let mut rows = Vec::with_capacity(end - start);
    for c in start..end {
        rows.push(embeds.row(c).to_vec());
    }
    let chunk = Tensor::from_rows(&rows);
    let scores = model.query_concept_scores(snapshot, &chunk);
    (0..scores.rows()).map(|q| scores.row(q).to_vec()).collect()
}

/// A generative detection: a localized box carrying a generated
/// hierarchical label and its re-calibrated objectness.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerativePrediction {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub phrase: String,
    pub category: String,
    pub parent: String,
    pub logprob: f64,
    pub objectness: f64,
    /// False when the generation did not parse into three fields.
    pub well_formed: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct GenerativeOptions {
    /// Number of corpus concepts used for foreground selection.
    pub corpus_concepts: usize,
    /// Foreground regions to caption (top queries by corpus similarity).
    pub foreground: usize,
    /// Re-calibrated scores at or below this are dropped.
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_label_len: usize,
}

impl Default for GenerativeOptions {
    fn default() -> Self {
        GenerativeOptions {
            corpus_concepts: 15000,
            foreground: 100,
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_label_len: 32,
        }
    }
}

/// Category-free detection: select foreground by similarity to the most
/// frequent corpus concepts, generate hierarchical labels (beam size 1),
/// re-calibrate objectness, threshold, then class-agnostic NMS.
pub fn generative_detect(
    model: &Model,
    corpus: &NounCorpus,
    image: &image::RgbImage,
    image_id: &str,
    opts: &GenerativeOptions,
) -> Vec<GenerativePrediction> {
    assert!(!corpus.is_empty(), "generative detection needs a concept corpus");
    let concept_texts = top_frequent(corpus, opts.corpus_concepts);
    let embeds = model.encode_concepts(&concept_texts);
    let snapshot = model.detect_snapshot(image, &embeds);
    let scores = model.query_concept_scores(&snapshot, &embeds);
    let k = snapshot.boxes.len();
    let mut ranked: Vec<(usize, f64)> = (0..k)
        .map(|q| {
            let best = scores.row(q).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (q, best)
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    ranked.truncate(opts.foreground);

    let mut labeled: Vec<(usize, GeneratedLabel)> = Vec::new();
    for &(q, _) in &ranked {
        let qfeat = Tensor::from_rows(&[snapshot.final_feats.row(q).to_vec()]);
        let mut label = generate(
            &model.params,
            &model.cfg.captioner,
            &model.vocab,
            &snapshot.frozen,
            &qfeat,
            snapshot.raw_boxes[q],
            OBJ,
            opts.max_label_len,
        );
        let afeat = Tensor::from_rows(&[snapshot.align_feats.row(q).to_vec()]);
        label.objectness = recalibrate_objectness(
            &model.params,
            &model.cfg.text,
            &model.vocab,
            &afeat,
            &label,
            model.tau(),
        );
        labeled.push((q, label));
    }
    // threshold then class-agnostic NMS on the survivors
    labeled.retain(|(_, l)| l.objectness > opts.score_threshold);
    let boxes: Vec<BBox> = labeled.iter().map(|(q, _)| snapshot.boxes[*q]).collect();
    let scores_v: Vec<f64> = labeled.iter().map(|(_, l)| l.objectness).collect();
    let kept = class_agnostic_nms(&boxes, &scores_v, opts.nms_iou);
    kept.into_iter()
        .map(|i| {
            let (q, label) = &labeled[i];
            let (phrase, category, parent, well_formed) = match &label.triplet {
                Some(t) => (
                    t.phrase.clone(),
                    t.category.clone(),
                    t.parent_category.clone(),
                    true,
                ),
                None => (label.text.clone(), String::new(), String::new(), false),
            };
            GenerativePrediction {
                image_id: image_id.to_string(),
                bbox: snapshot.boxes[*q].to_corners(),
                phrase,
                category,
                parent,
                logprob: label.log_prob,
                objectness: label.objectness,
                well_formed,
            }
        })
        .collect()
}

/// Maps a generated category onto a fixed taxonomy by cosine similarity of
/// text-encoder embeddings; rejects below `sim_threshold`.
pub fn map_generated_to_taxonomy(
    model: &Model,
    generated_category: &str,
    class_names: &[String],
    sim_threshold: f64,
) -> Option<(usize, f64)> {
    if class_names.is_empty() || generated_category.trim().is_empty() {
        return None;
    }
    let mut texts = vec![generated_category.to_string()];
    texts.extend(class_names.iter().cloned());
    let embeds = model.encode_concepts(&texts);
    let query = embeds.row(0);
    let mut best: Option<(usize, f64)> = None;
    for (i, _) in class_names.iter().enumerate() {
        let e = embeds.row(i + 1);
        let sim: f64 = query.iter().zip(e).map(|(&a, &b)| a * b).sum();
        match best {
            Some((_, bs)) if sim <= bs => {}
            _ => best = Some((i, sim)),
        }
    }
    let (idx, sim) = best?;
    if sim < sim_threshold {
        None
    } else {
        Some((idx, sim))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::CaptionerCfg;
    use crate::detector::DetectorCfg;
    use crate::model::ModelConfig;
    use crate::text_encoder::{TextEncoderCfg, Vocab};

    fn small_model() -> Model {
        let cfg = ModelConfig {
            detector: DetectorCfg { dim: 16, heads: 2, ffn_hidden: 32, queries: 5, ..Default::default() },
            text: TextEncoderCfg { dim: 16, heads: 2, ..Default::default() },
            captioner: CaptionerCfg { dim: 16, heads: 2, ffn_hidden: 32, ..Default::default() },
            seed: 21,
        };
        let vocab = Vocab::build(vec![
            "red square | blue circle | green cross shape object".to_string(),
        ]);
        Model::new(cfg, vocab)
    }

    fn demo_image() -> image::RgbImage {
        image::RgbImage::from_fn(64, 64, |x, y| {
            if (10..30).contains(&x) && (10..30).contains(&y) {
                image::Rgb([200, 40, 40])
            } else {
                image::Rgb([20, 20, 20])
            }
        })
    }

    fn categories(names: &[&str]) -> Vec<ConceptRecord> {
        names.iter().map(|n| ConceptRecord::positive(n)).collect()
    }

    #[test]
    fn chunk_arithmetic_matches_protocol() {
        assert_eq!(chunk_count(1203, 40), 31);
        assert_eq!(chunk_count(40, 40), 1);
        assert_eq!(chunk_count(41, 40), 2);
    }

    #[test]
    fn chunked_equals_unchunked_before_truncation() {
        let model = small_model();
        let img = demo_image();
        let cats = categories(&["red square", "blue circle", "green cross", "object"]);
        let unchunked = detect(
            &model,
            &img,
            "i",
            &cats,
            &DetectOptions { chunk_size: 100, retain_top: 10_000, score_threshold: 0.0 },
        );
        let chunked = detect(
            &model,
            &img,
            "i",
            &cats,
            &DetectOptions { chunk_size: 2, retain_top: 10_000, score_threshold: 0.0 },
        );
        assert_eq!(unchunked.len(), chunked.len());
        let key = |p: &Prediction| {
            (
                p.bbox.map(f64::to_bits),
                p.category_index,
            )
        };
        let mut a: Vec<_> = unchunked.iter().map(|p| (key(p), p.score.to_bits())).collect();
        let mut b: Vec<_> = chunked.iter().map(|p| (key(p), p.score.to_bits())).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b, "per-(box, concept) scores must be bitwise identical");
    }

    #[test]
    fn retain_top_caps_per_chunk() {
        let model = small_model();
        let img = demo_image();
        let cats = categories(&["red square", "blue circle", "green cross", "object"]);
        let preds = detect(
            &model,
            &img,
            "i",
            &cats,
            &DetectOptions { chunk_size: 2, retain_top: 3, score_threshold: 0.0 },
        );
        // 2 chunks x 3 retained
        assert_eq!(preds.len(), 6);
    }

    #[test]
    fn generative_threshold_one_empties_output() {
        let model = small_model();
        let img = demo_image();
        let corpus = crate::concepts::build_corpus(
            vec![
                crate::concepts::EntityTriplet::new("red square", "red square", "square").unwrap(),
                crate::concepts::EntityTriplet::new("blue circle", "blue circle", "circle").unwrap(),
            ],
            1,
        );
        let preds = generative_detect(
            &model,
            &corpus,
            &img,
            "i",
            &GenerativeOptions { score_threshold: 1.0, ..Default::default() },
        );
        assert!(preds.is_empty());
        let one = generative_detect(
            &model,
            &corpus,
            &img,
            "i",
            &GenerativeOptions { foreground: 1, score_threshold: 0.0, ..Default::default() },
        );
        assert!(one.len() <= 1);
    }

    #[test]
    fn raising_generative_threshold_never_adds_predictions() {
        let model = small_model();
        let img = demo_image();
        let corpus = crate::concepts::build_corpus(
            vec![crate::concepts::EntityTriplet::new("red square", "red square", "square").unwrap()],
            1,
        );
        let mut prev: Option<Vec<u64>> = None;
        for thr in [0.0, 0.2, 0.5, 0.9] {
            let preds = generative_detect(
                &model,
                &corpus,
                &img,
                "i",
                &GenerativeOptions { score_threshold: thr, nms_iou: 1.1, ..Default::default() },
            );
            let keys: Vec<u64> = preds.iter().map(|p| p.objectness.to_bits()).collect();
            if let Some(p) = &prev {
                for k in &keys {
                    assert!(p.contains(k));
                }
            }
            prev = Some(keys);
        }
    }

    #[test]
    fn taxonomy_mapping_identity_rejection_and_oracle() {
        let model = small_model();
        let classes: Vec<String> = ["red square", "blue circle", "green cross"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (idx, sim) = map_generated_to_taxonomy(&model, "red square", &classes, 0.7).unwrap();
        assert_eq!(idx, 0);
        assert!((sim - 1.0).abs() < 1e-9, "identical text has similarity 1");
        // idempotent: mapping the matched class maps to itself
        let (idx2, _) = map_generated_to_taxonomy(&model, &classes[idx], &classes, 0.7).unwrap();
        assert_eq!(idx2, idx);
        // threshold 1.1 rejects everything
        assert!(map_generated_to_taxonomy(&model, "red square", &classes, 1.1).is_none());
        // argmax equals a linear-scan oracle; permutation re-indexes it
        let embeds = model.encode_concepts(
            &std::iter::once("red square".to_string())
                .chain(classes.iter().cloned())
                .collect::<Vec<_>>(),
        );
        let q = embeds.row(0);
        let mut best = (0usize, f64::NEG_INFINITY);
        for i in 0..classes.len() {
            let sim: f64 = q.iter().zip(embeds.row(i + 1)).map(|(&a, &b)| a * b).sum();
            if sim > best.1 {
                best = (i, sim);
            }
        }
        assert_eq!(best.0, idx);
        let permuted: Vec<String> = vec![classes[2].clone(), classes[0].clone(), classes[1].clone()];
        let (pidx, psim) = map_generated_to_taxonomy(&model, "red square", &permuted, 0.7).unwrap();
        assert_eq!(permuted[pidx], classes[idx]);
        assert!((psim - sim).abs() < 1e-12);
    }
}
