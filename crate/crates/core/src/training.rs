//! The three-stage training scheme: single-source batch construction,
//! large-scale jitter, per-stage freeze policies and objectives, and
//! balanced sampling for the pseudo-labeled data.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::captioner::{image_caption_loss, object_caption_loss};
use crate::concepts::{
    format_object_groundtruth, merge_negative_pools, sample_negatives, ConceptRecord, NounCorpus,
};
use crate::data::{DataSource, Dataset, GroundTruthSample};
use crate::detector::loss::{detection_loss, DetectionTargets, LossBreakdown, LossWeights};
use crate::detector::matching::{hungarian_match, CostWeights};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::Model;
use crate::nn::{AdamW, AdamWConfig, Session};
use crate::tensor::Tensor;

/// One training stage's recipe.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: u8,
    pub datasets: Vec<String>,
    pub resolution_min: u32,
    pub resolution_max: u32,
    pub epochs: usize,
    pub base_lr: f64,
    pub text_lr_mult: f64,
    pub frozen: Vec<String>,
    pub losses: Vec<String>,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub negatives_per_batch: usize,
    pub lsj_scale_min: f64,
    pub lsj_scale_max: f64,
    /// Balanced-subset size for pseudo-labeled data (0 keeps everything).
    pub balanced_subset: usize,
}

impl StageConfig {
    pub fn stage1_default() -> Self {
        StageConfig {
            stage: 1,
            datasets: vec!["detection_train".into(), "grounding_train".into()],
            resolution_min: 64,
            resolution_max: 64,
            epochs: 12,
            base_lr: 1.4e-3,
            text_lr_mult: 0.1,
            frozen: vec![],
            losses: vec!["det".into()],
            batch_size: 8,
            seed: 0,
            warmup_steps: 50,
            weight_decay: 0.05,
            negatives_per_batch: 64,
            lsj_scale_min: 0.7,
            lsj_scale_max: 1.4,
            balanced_subset: 0,
        }
    }

    pub fn stage2_default() -> Self {
        StageConfig {
            stage: 2,
            datasets: vec!["imagetext_train".into()],
            resolution_min: 64,
            resolution_max: 64,
            epochs: 3,
            base_lr: 1e-3,
            text_lr_mult: 0.0,
            frozen: vec![
                "backbone".into(),
                "pixel_encoder".into(),
                "decoder".into(),
                "text_encoder".into(),
            ],
            losses: vec!["lm".into()],
            batch_size: 8,
            seed: 0,
            warmup_steps: 20,
            weight_decay: 0.05,
            negatives_per_batch: 0,
            lsj_scale_min: 1.0,
            lsj_scale_max: 1.0,
            balanced_subset: 0,
        }
    }

    pub fn stage3_default() -> Self {
        StageConfig {
            stage: 3,
            datasets: vec![
                "detection_train".into(),
                "grounding_train".into(),
                "imagetext_train".into(),
            ],
            resolution_min: 64,
            resolution_max: 64,
            epochs: 5,
            base_lr: 5e-4,
            text_lr_mult: 0.1,
            frozen: vec![],
            losses: vec!["det".into(), "lm".into()],
            batch_size: 8,
            seed: 0,
            warmup_steps: 20,
            weight_decay: 0.05,
            negatives_per_batch: 64,
            lsj_scale_min: 1.0,
            lsj_scale_max: 1.0,
            balanced_subset: 120,
        }
    }

    pub fn default_for_stage(stage: u8) -> Result<Self> {
        match stage {
            1 => Ok(Self::stage1_default()),
            2 => Ok(Self::stage2_default()),
            3 => Ok(Self::stage3_default()),
            s => Err(Error::Config(format!("unknown stage {s}"))),
        }
    }

    pub fn active(&self) -> ActiveLosses {
        ActiveLosses {
            det: self.losses.iter().any(|l| l == "det"),
            lm: self.losses.iter().any(|l| l == "lm"),
        }
    }

    /// Enforces the per-stage contract on losses and freezes.
    pub fn validate(&self) -> Result<()> {
        let a = self.active();
        let fail = |m: &str| Err(Error::Config(format!("stage {}: {m}", self.stage)));
        match self.stage {
            1 => {
                if !(a.det && !a.lm) {
                    return fail("stage 1 activates only the detection loss");
                }
            }
            2 => {
                if !(a.lm && !a.det) {
                    return fail("stage 2 activates only the captioning loss");
                }
                for m in ["backbone", "pixel_encoder", "decoder"] {
                    if !self.frozen.iter().any(|f| f == m) {
                        return fail(&format!("stage 2 must freeze {m}"));
                    }
                }
            }
            3 => {
                if !(a.det && a.lm) {
                    return fail("stage 3 activates both losses");
                }
            }
            _ => return fail("stage must be 1, 2, or 3"),
        }
        if self.resolution_min % 32 != 0 || self.resolution_max % 32 != 0 {
            return fail("resolutions must be divisible by 32");
        }
        if self.resolution_min > self.resolution_max {
            return fail("resolution_min > resolution_max");
        }
        Ok(())
    }

    pub fn load_toml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: StageConfig = toml::from_str(&text).map_err(Error::Toml)?;
        Ok(cfg)
    }

    pub fn save_toml(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize stage config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ActiveLosses {
    pub det: bool,
    pub lm: bool,
}

/// Maps the config's module names to parameter-name prefixes.
pub fn module_prefix(module: &str) -> Option<&'static str> {
    match module {
        "backbone" => Some("det.bb"),
        "pixel_encoder" => Some("det.enc"),
        "decoder" => Some("det.dec"),
        "text_encoder" => Some("text"),
        "captioner" => Some("cap"),
        _ => None,
    }
}

pub fn frozen_predicate(frozen: &[String]) -> impl Fn(&str) -> bool {
    let prefixes: Vec<&'static str> = frozen
        .iter()
        .filter_map(|m| module_prefix(m))
        .collect();
    move |name: &str| prefixes.iter().any(|p| name.starts_with(p))
}

/// Whether the whole detector path (and text encoder) is frozen, which lets
/// the captioner train against detached visual features.
fn detector_fully_frozen(frozen: &[String]) -> bool {
    ["backbone", "pixel_encoder", "decoder", "text_encoder"]
        .iter()
        .all(|m| frozen.iter().any(|f| f == *m))
}

/// A batch drawn from exactly one dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceBatch {
    pub dataset: usize,
    pub source: DataSource,
    pub indices: Vec<usize>,
}

/// One epoch of single-source batches: per-dataset shuffles, then a shuffled
/// interleaving of the batches. Deterministic for a fixed seed.
pub fn make_batches(datasets: &[Dataset], batch_size: usize, seed: u64) -> Vec<SourceBatch> {
    let mut batches = Vec::new();
    for (di, ds) in datasets.iter().enumerate() {
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(di as u64).wrapping_mul(0x9e37));
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        for chunk in idx.chunks(batch_size.max(1)) {
            batches.push(SourceBatch {
                dataset: di,
                source: ds.source,
                indices: chunk.to_vec(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
    for i in (1..batches.len()).rev() {
        let j = rng.gen_range(0..=i);
        batches.swap(i, j);
    }
    batches
}

/// Pure coordinate transform of large-scale jitter: scale about the origin,
/// shift by the crop offset, clip to the target canvas, drop boxes reduced
/// to (near) zero area.
pub fn lsj_transform_box(
    b: &BBox,
    scale: f64,
    offset_x: f64,
    offset_y: f64,
    orig_side: f64,
    target_side: f64,
) -> Option<BBox> {
    let x0 = (b.x0 * orig_side * scale - offset_x) / target_side;
    let y0 = (b.y0 * orig_side * scale - offset_y) / target_side;
    let x1 = (b.x1 * orig_side * scale - offset_x) / target_side;
    let y1 = (b.y1 * orig_side * scale - offset_y) / target_side;
    let clipped = BBox::from_corners(x0, y0, x1, y1).clip_unit();
    let min_extent = 2.0 / target_side; // below two pixels is gone
    if clipped.width() < min_extent || clipped.height() < min_extent {
        None
    } else {
        Some(clipped)
    }
}

/// Large-scale jitter: random rescale in `[scale_min, scale_max]`, then
/// crop/pad to `target` x `target`. Returns the image, surviving boxes, and
/// the indices of the objects that survived.
pub fn large_scale_jitter(
    image: &RgbImage,
    boxes: &[BBox],
    scale_min: f64,
    scale_max: f64,
    target: u32,
    rng: &mut ChaCha8Rng,
) -> (RgbImage, Vec<BBox>, Vec<usize>) {
    let orig = image.width().max(image.height()) as f64;
    let scale = if scale_max > scale_min {
        rng.gen_range(scale_min..scale_max)
    } else {
        scale_min
    };
    let new_w = ((image.width() as f64 * scale).round() as u32).max(1);
    let new_h = ((image.height() as f64 * scale).round() as u32).max(1);
    let scaled = image::imageops::resize(image, new_w, new_h, image::imageops::FilterType::Nearest);
    let (off_x, off_y) = if new_w == target && new_h == target {
        (0i64, 0i64)
    } else {
        let range_x = new_w as i64 - target as i64;
        let range_y = new_h as i64 - target as i64;
        let ox = if range_x > 0 {
            rng.gen_range(0..=range_x)
        } else if range_x < 0 {
            -rng.gen_range(0..=-range_x)
        } else {
            0
        };
        let oy = if range_y > 0 {
            rng.gen_range(0..=range_y)
        } else if range_y < 0 {
            -rng.gen_range(0..=-range_y)
        } else {
            0
        };
        (ox, oy)
    };
    let mut canvas = RgbImage::from_pixel(target, target, image::Rgb([24, 24, 26]));
    for ty in 0..target {
        for tx in 0..target {
            let sx = tx as i64 + off_x;
            let sy = ty as i64 + off_y;
            if sx >= 0 && sy >= 0 && (sx as u32) < new_w && (sy as u32) < new_h {
                canvas.put_pixel(tx, ty, *scaled.get_pixel(sx as u32, sy as u32));
            }
        }
    }
    let mut kept_boxes = Vec::new();
    let mut kept_idx = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        if let Some(nb) = lsj_transform_box(
            b,
            scale,
            off_x as f64,
            off_y as f64,
            orig,
            target as f64,
        ) {
            kept_boxes.push(nb);
            kept_idx.push(i);
        }
    }
    (canvas, kept_boxes, kept_idx)
}

/// Greedy round-robin over category buckets: every category with at least
/// one sample is represented before any category contributes a second.
pub fn balanced_sample(samples: &[GroundTruthSample], n: usize, seed: u64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut buckets: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let mut cats: Vec<&str> = s.objects.iter().map(|o| o.triplet.category.as_str()).collect();
        cats.sort();
        cats.dedup();
        for c in cats {
            buckets.entry(c.to_string()).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for bucket in buckets.values_mut() {
        for i in (1..bucket.len()).rev() {
            let j = rng.gen_range(0..=i);
            bucket.swap(i, j);
        }
    }
    let mut chosen: Vec<usize> = Vec::new();
    let mut taken: BTreeSet<usize> = BTreeSet::new();
    let mut cursors: BTreeMap<String, usize> = BTreeMap::new();
    while chosen.len() < n {
        let mut progressed = false;
        for (cat, bucket) in &buckets {
            if chosen.len() >= n {
                break;
            }
            let cur = cursors.entry(cat.clone()).or_insert(0);
            while *cur < bucket.len() && taken.contains(&bucket[*cur]) {
                *cur += 1;
            }
            if *cur < bucket.len() {
                taken.insert(bucket[*cur]);
                chosen.push(bucket[*cur]);
                *cur += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    chosen
}

/// One optimization step's logged terms.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    pub l_det: f64,
    pub l_lm: f64,
    pub align: f64,
    pub l1: f64,
    pub iou: f64,
    pub lr: f64,
}

pub struct StageReport {
    pub steps: usize,
    pub logs: Vec<StepLog>,
    pub duration_s: f64,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
}

/// Everything needed to compute one batch's loss.
pub struct BatchData<'a> {
    pub source: DataSource,
    pub samples: Vec<(RgbImage, GroundTruthSample)>,
    pub definitions: &'a BTreeMap<String, String>,
    pub negatives: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BatchLossTerms {
    pub total: f64,
    pub det: f64,
    pub lm: f64,
    pub breakdown: LossBreakdown,
}

/// Builds the batch's concept list: deduplicated positives from every
/// sample, then the shared negatives.
fn batch_concepts(
    batch: &BatchData,
) -> (Vec<ConceptRecord>, Vec<BTreeMap<usize, usize>>) {
    let mut texts: BTreeMap<String, usize> = BTreeMap::new();
    let mut records: Vec<ConceptRecord> = Vec::new();
    let mut per_sample: Vec<BTreeMap<usize, usize>> = Vec::new();
    for (_, sample) in &batch.samples {
        let mut mapping = BTreeMap::new();
        for (oi, obj) in sample.objects.iter().enumerate() {
            let mut rec = match batch.source {
                DataSource::Detection => {
                    let mut r = ConceptRecord::positive(&obj.triplet.category);
                    if let Some(d) = batch.definitions.get(&obj.triplet.category) {
                        r = r.with_definition(d);
                    }
                    r
                }
                DataSource::Grounding => ConceptRecord::positive(&obj.triplet.phrase),
                DataSource::ImageText => ConceptRecord::positive(&obj.triplet.category),
            };
            rec.polarity = crate::concepts::Polarity::Positive;
            let idx = match texts.get(&rec.text) {
                Some(&i) => i,
                None => {
                    let i = records.len();
                    texts.insert(rec.text.clone(), i);
                    records.push(rec);
                    i
                }
            };
            mapping.insert(oi, idx);
        }
        per_sample.push(mapping);
    }
    for neg in &batch.negatives {
        if !texts.contains_key(neg) {
            texts.insert(neg.clone(), records.len());
            records.push(ConceptRecord::negative(neg));
        }
    }
    (records, per_sample)
}

/// Computes one batch's loss on a fresh session. Returns the loss variable
/// plus logged terms. This is the single code path used by every stage.
pub fn compute_batch_loss<'s>(
    model: &'s Model,
    batch: &BatchData,
    active: ActiveLosses,
    frozen: &[String],
    weights: &LossWeights,
    cost: &CostWeights,
) -> (Session<'s>, Var, BatchLossTerms) {
    let mut sess = Session::new(&model.params);
    let (records, concept_maps) = batch_concepts(batch);
    let texts: Vec<String> = records.iter().map(|r| r.encoder_text()).collect();
    let concepts = if texts.is_empty() {
        sess.g.leaf(Tensor::zeros(vec![1, model.cfg.text.dim]))
    } else {
        model.encode_concepts_graph(&mut sess, &texts)
    };
    let detach_visual = detector_fully_frozen(frozen);

    let mut terms = BatchLossTerms::default();
    let mut total: Option<Var> = None;
    let n = batch.samples.len().max(1) as f64;
    for ((img, sample), concept_map) in batch.samples.iter().zip(&concept_maps) {
        let fwd = model.detection_forward_graph(&mut sess, img, concepts);
        let mut sample_loss: Option<Var> = None;

        if active.det {
            let targets = DetectionTargets {
                boxes: sample.objects.iter().map(|o| o.bbox).collect(),
                concept_indices: (0..sample.objects.len())
                    .map(|oi| concept_map[&oi])
                    .collect(),
            };
            let (det, breakdown) = detection_loss(
                &mut sess,
                &fwd.decoder.layer_boxes,
                &fwd.decoder.layer_logits,
                Some((fwd.pix.proposals, fwd.selection.enc_logits)),
                &targets,
                weights,
                cost,
            );
            terms.det += breakdown.total / n;
            terms.breakdown.align += breakdown.align / n;
            terms.breakdown.l1 += breakdown.l1 / n;
            terms.breakdown.iou += breakdown.iou / n;
            sample_loss = Some(det);
        }

        if active.lm && batch.source == DataSource::ImageText {
            // object-level LM on positive queries from the final layer
            let last_boxes_var = *fwd.decoder.layer_boxes.last().expect("layers");
            let last_logits_var = *fwd.decoder.layer_logits.last().expect("layers");
            let last_boxes = sess.g.value(last_boxes_var).clone();
            let pred_boxes: Vec<BBox> = (0..last_boxes.rows())
                .map(|i| {
                    let r = last_boxes.row(i);
                    BBox::from_center(r[0], r[1], r[2], r[3])
                })
                .collect();
            let gt_boxes: Vec<BBox> = sample.objects.iter().map(|o| o.bbox).collect();
            let gt_concepts: Vec<usize> =
                (0..sample.objects.len()).map(|oi| concept_map[&oi]).collect();
            let assignment = hungarian_match(
                &pred_boxes,
                sess.g.value(last_logits_var),
                &gt_boxes,
                &gt_concepts,
                cost,
            )
            .expect("queries >= objects");

            let feats = if detach_visual {
                sess.g.detach(fwd.decoder.final_feats)
            } else {
                fwd.decoder.final_feats
            };
            let levels_raw = fwd.pix.level_slices(&mut sess);
            let levels: Vec<Var> = if detach_visual {
                levels_raw.iter().map(|&v| sess.g.detach(v)).collect()
            } else {
                levels_raw
            };
            let mut items = Vec::new();
            for &(gi, qi) in &assignment {
                let feat = sess.g.slice_rows(feats, qi, qi + 1);
                let r = last_boxes.row(qi);
                items.push((
                    feat,
                    [r[0], r[1], r[2], r[3]],
                    format_object_groundtruth(&sample.objects[gi].triplet),
                ));
            }
            let (obj_loss, _skipped) = object_caption_loss(
                &mut sess,
                &model.cfg.captioner,
                &model.vocab,
                &items,
                &levels,
                &fwd.pix.level_shapes,
            );
            let caption = sample.caption.clone().unwrap_or_default();
            let img_loss = image_caption_loss(
                &mut sess,
                &model.cfg.captioner,
                &model.vocab,
                &caption,
                &levels,
                &fwd.pix.level_shapes,
                &fwd.pix.refs,
                &fwd.pix.ref_levels,
            );
            let lm = sess.g.add(obj_loss, img_loss);
            terms.lm += sess.g.value(lm).item() / n;
            sample_loss = Some(match sample_loss {
                Some(d) => sess.g.add(d, lm),
                None => lm,
            });
        }

        if let Some(sl) = sample_loss {
            total = Some(match total {
                Some(t) => sess.g.add(t, sl),
                None => sl,
            });
        }
    }
    let total = total.unwrap_or_else(|| sess.g.scalar(0.0));
    let total = sess.g.mul_scalar(total, 1.0 / n);
    terms.total = sess.g.value(total).item();
    (sess, total, terms)
}

fn negative_pool_for<'a>(
    source: DataSource,
    dataset_corpus: &'a NounCorpus,
    noun_corpus: &'a NounCorpus,
) -> &'a NounCorpus {
    match source {
        DataSource::Detection => dataset_corpus,
        _ => noun_corpus,
    }
}

/// Negative concepts for one batch, assembled across four virtual shards
/// and deduplicated, mirroring cross-node collection.
pub fn batch_negatives(
    positives: &[String],
    pool: &NounCorpus,
    total: usize,
    seed: u64,
) -> Vec<String> {
    if total == 0 || pool.is_empty() {
        return Vec::new();
    }
    let shards = 4usize;
    let per_shard = total.div_ceil(shards);
    let pools: Vec<Vec<String>> = (0..shards)
        .map(|s| {
            let (negs, _) = sample_negatives(
                positives,
                pool,
                per_shard,
                seed.wrapping_mul(31).wrapping_add(s as u64),
            );
            negs
        })
        .collect();
    let mut merged = merge_negative_pools(&pools);
    merged.truncate(total);
    merged
}

/// Runs one training stage over datasets in `root`. Honors the freeze set
/// (checked by hashing), applies the text-encoder learning-rate multiplier,
/// and logs one entry per step.
pub fn run_stage(model: &mut Model, cfg: &StageConfig, root: &Path) -> Result<StageReport> {
    cfg.validate()?;
    let started = Instant::now();
    let mut datasets = Vec::new();
    for id in &cfg.datasets {
        let source = source_for_dataset_id(id)?;
        let mut ds = Dataset::load(root, id, source)?;
        if let Ok(cats) = crate::data::CategoryFile::load(&root.join("categories.json")) {
            ds.definitions = cats.definitions.clone();
        }
        if cfg.balanced_subset > 0 && source == DataSource::ImageText {
            let keep = balanced_sample(&ds.samples, cfg.balanced_subset, cfg.seed);
            ds.samples = keep.iter().map(|&i| ds.samples[i].clone()).collect();
            ds.images = keep.iter().map(|&i| ds.images[i].clone()).collect();
        }
        datasets.push(ds);
    }
    let noun_corpus = NounCorpus::load(&root.join("corpus.tsv")).unwrap_or_default();
    let dataset_corpora: Vec<NounCorpus> = datasets
        .iter()
        .map(|ds| {
            crate::concepts::build_corpus(
                ds.samples
                    .iter()
                    .flat_map(|s| s.objects.iter().map(|o| o.triplet.clone())),
                1,
            )
        })
        .collect();

    let batches_per_epoch = make_batches(&datasets, cfg.batch_size, cfg.seed).len();
    let total_steps = (batches_per_epoch * cfg.epochs).max(1);
    let mut opt = AdamW::new(
        &model.params,
        AdamWConfig {
            lr: cfg.base_lr,
            weight_decay: cfg.weight_decay,
            warmup_steps: cfg.warmup_steps,
            total_steps,
            ..Default::default()
        },
    );
    let frozen = frozen_predicate(&cfg.frozen);
    let frozen_hash_before = model.params.hash_subset(&frozen);
    let active = cfg.active();
    let weights = LossWeights::default();
    let cost = CostWeights::default();

    let mut logs = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let batches = make_batches(&datasets, cfg.batch_size, cfg.seed.wrapping_add(epoch as u64));
        for b in &batches {
            let ds = &datasets[b.dataset];
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.seed ^ ((epoch as u64) << 32) ^ (step as u64),
            );
            let target = pick_resolution(cfg, &mut rng);
            let mut samples = Vec::with_capacity(b.indices.len());
            for &si in &b.indices {
                let sample = &ds.samples[si];
                let img = &ds.images[si];
                let boxes: Vec<BBox> = sample.objects.iter().map(|o| o.bbox).collect();
                let (jimg, jboxes, kept) = large_scale_jitter(
                    img,
                    &boxes,
                    cfg.lsj_scale_min,
                    cfg.lsj_scale_max,
                    target,
                    &mut rng,
                );
                let mut s = sample.clone();
                s.objects = kept
                    .iter()
                    .zip(jboxes.iter())
                    .map(|(&i, nb)| {
                        let mut o = sample.objects[i].clone();
                        o.bbox = *nb;
                        o
                    })
                    .collect();
                samples.push((jimg, s));
            }
            let positives: Vec<String> = samples
                .iter()
                .flat_map(|(_, s)| {
                    s.objects.iter().map(|o| match b.source {
                        DataSource::Grounding => o.triplet.phrase.clone(),
                        _ => o.triplet.category.clone(),
                    })
                })
                .collect();
            let negatives = if active.det {
                batch_negatives(
                    &positives,
                    negative_pool_for(b.source, &dataset_corpora[b.dataset], &noun_corpus),
                    cfg.negatives_per_batch,
                    cfg.seed ^ (step as u64).wrapping_mul(0x5851),
                )
            } else {
                Vec::new()
            };
            let batch = BatchData {
                source: b.source,
                samples,
                definitions: &datasets[b.dataset].definitions,
                negatives,
            };
            let (sess, loss, terms) =
                compute_batch_loss(model, &batch, active, &cfg.frozen, &weights, &cost);
            let grads = sess.param_grads(loss);
            drop(sess);
            let lr = opt.current_lr();
            opt.apply(&mut model.params, &grads, &frozen, |name| {
                if name.starts_with("text") {
                    cfg.text_lr_mult
                } else {
                    1.0
                }
            });
            logs.push(StepLog {
                step,
                stage: cfg.stage,
                loss: terms.total,
                l_det: terms.det,
                l_lm: terms.lm,
                align: terms.breakdown.align,
                l1: terms.breakdown.l1,
                iou: terms.breakdown.iou,
                lr,
            });
            step += 1;
        }
    }
    let frozen_hash_after = model.params.hash_subset(&frozen);
    assert_eq!(
        frozen_hash_before, frozen_hash_after,
        "frozen parameters moved during stage {}",
        cfg.stage
    );
    Ok(StageReport {
        steps: step,
        logs,
        duration_s: started.elapsed().as_secs_f64(),
        frozen_hash_before,
        frozen_hash_after,
    })
}

fn pick_resolution(cfg: &StageConfig, rng: &mut ChaCha8Rng) -> u32 {
    if cfg.resolution_max <= cfg.resolution_min {
        return cfg.resolution_min;
    }
    let steps = (cfg.resolution_max - cfg.resolution_min) / 32;
    cfg.resolution_min + 32 * rng.gen_range(0..=steps)
}

pub fn source_for_dataset_id(id: &str) -> Result<DataSource> {
    if id.starts_with("detection") {
        Ok(DataSource::Detection)
    } else if id.starts_with("grounding") {
        Ok(DataSource::Grounding)
    } else if id.starts_with("imagetext") {
        Ok(DataSource::ImageText)
    } else {
        Err(Error::Config(format!(
            "cannot infer source for dataset id {id:?} (expected detection*/grounding*/imagetext*)"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::EntityTriplet;
    use crate::data::GtObject;

    fn dummy_sample(cats: &[&str]) -> GroundTruthSample {
        GroundTruthSample {
            image_id: "x".into(),
            image_path: "x.png".into(),
            objects: cats
                .iter()
                .map(|c| GtObject {
                    bbox: BBox::from_corners(0.1, 0.1, 0.4, 0.4),
                    triplet: EntityTriplet::new(&format!("small {c}"), c, "shape").unwrap(),
                })
                .collect(),
            caption: None,
        }
    }

    #[test]
    fn stage_config_contracts() {
        assert!(StageConfig::stage1_default().validate().is_ok());
        assert!(StageConfig::stage2_default().validate().is_ok());
        assert!(StageConfig::stage3_default().validate().is_ok());
        let mut bad = StageConfig::stage2_default();
        bad.frozen.retain(|m| m != "decoder");
        assert!(bad.validate().is_err());
        let mut bad = StageConfig::stage1_default();
        bad.losses = vec!["lm".into()];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stage_config_toml_round_trip() {
        let cfg = StageConfig::stage3_default();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stage3.toml");
        cfg.save_toml(&p).unwrap();
        let loaded = StageConfig::load_toml(&p).unwrap();
        assert_eq!(toml::to_string(&cfg).unwrap(), toml::to_string(&loaded).unwrap());
    }

    #[test]
    fn batches_are_single_source_and_cover_everything() {
        let mk = |id: &str, source: DataSource, n: usize| {
            let mut samples = Vec::new();
            let mut images = Vec::new();
            for i in 0..n {
                let mut s = dummy_sample(&["red square"]);
                s.image_id = format!("{id}_{i}");
                samples.push(s);
                images.push(RgbImage::new(4, 4));
            }
            Dataset {
                id: id.into(),
                source,
                root: std::path::PathBuf::new(),
                samples,
                images,
                definitions: Default::default(),
            }
        };
        let datasets = vec![
            mk("detection_train", DataSource::Detection, 20),
            mk("grounding_train", DataSource::Grounding, 20),
        ];
        let batches = make_batches(&datasets, 4, 9);
        assert_eq!(batches.len(), 10);
        let mut seen: Vec<BTreeSet<usize>> = vec![BTreeSet::new(), BTreeSet::new()];
        for b in &batches {
            assert!(!b.indices.is_empty());
            // single-source purity: a batch references exactly one dataset
            for &i in &b.indices {
                assert!(seen[b.dataset].insert(i), "sample repeated in epoch");
            }
        }
        assert_eq!(seen[0].len(), 20);
        assert_eq!(seen[1].len(), 20);
        // two equal datasets get equal batch counts
        let counts = batches.iter().filter(|b| b.dataset == 0).count();
        assert_eq!(counts, 5);
        // determinism
        assert_eq!(make_batches(&datasets, 4, 9), batches);
    }

    #[test]
    fn lsj_identity_and_doubling() {
        let img = RgbImage::from_fn(64, 64, |x, y| {
            if (20..30).contains(&x) && (20..30).contains(&y) {
                image::Rgb([200, 0, 0])
            } else {
                image::Rgb([24, 24, 26])
            }
        });
        let b = BBox::from_corners(20.0 / 64.0, 20.0 / 64.0, 30.0 / 64.0, 30.0 / 64.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, boxes, kept) = large_scale_jitter(&img, &[b], 1.0, 1.0, 64, &mut rng);
        assert_eq!(kept, vec![0]);
        assert_eq!(out.dimensions(), (64, 64));
        for (a, bb) in b.to_corners().iter().zip(boxes[0].to_corners().iter()) {
            assert!((a - bb).abs() < 1e-12, "scale 1 at zero offset is the identity");
        }
        assert_eq!(out.get_pixel(25, 25), img.get_pixel(25, 25));

        // doubling scale doubles box extent before the crop
        let nb = lsj_transform_box(&b, 2.0, 0.0, 0.0, 64.0, 128.0).unwrap();
        assert!((nb.width() * 128.0 - 20.0).abs() < 1e-9);
        let nb64 = lsj_transform_box(&b, 2.0, 0.0, 0.0, 64.0, 64.0).unwrap();
        assert!((nb64.width() - 2.0 * b.width()).abs() < 1e-9);

        // a crop that pushes everything outside drops the box
        assert!(lsj_transform_box(&b, 1.0, 60.0, 60.0, 64.0, 64.0).is_none());
    }

    #[test]
    fn balanced_sampling_covers_categories_first() {
        let mut samples = Vec::new();
        // skewed pool: 20 of one category, few of others
        for _ in 0..20 {
            samples.push(dummy_sample(&["red square"]));
        }
        for _ in 0..3 {
            samples.push(dummy_sample(&["blue circle"]));
        }
        samples.push(dummy_sample(&["green cross"]));
        let chosen = balanced_sample(&samples, 3, 5);
        let cats: BTreeSet<String> = chosen
            .iter()
            .flat_map(|&i| samples[i].objects.iter().map(|o| o.triplet.category.clone()))
            .collect();
        assert_eq!(cats.len(), 3, "every category represented before repeats");
        assert!(balanced_sample(&samples, 0, 5).is_empty());
        let n_cats = 3;
        let chosen = balanced_sample(&samples, n_cats, 11);
        assert_eq!(chosen.len(), n_cats);
        // requesting more than the pool returns the whole pool
        let all = balanced_sample(&samples, 500, 5);
        assert_eq!(all.len(), samples.len());
    }

    #[test]
    fn frozen_prefixes_map_to_parameters() {
        let f = frozen_predicate(&[
            "backbone".into(),
            "pixel_encoder".into(),
            "decoder".into(),
        ]);
        assert!(f("det.bb0.embed.w"));
        assert!(f("det.enc.l0.attn.value.w"));
        assert!(f("det.dec.query_embed"));
        assert!(!f("text.tok_embed"));
        assert!(!f("cap.lm.w"));
    }
}
