//! Synthetic shapes benchmark: rendered scenes with exact boxes and
//! hierarchical labels, raw/refined captions, a mock-LLM response table,
//! and train/val splits with held-out categories for zero-shot evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{
    build_entity_prompt, build_filter_prompt, build_recaption_prompt, format_entity_line,
    MockLlmClient, RawPair,
};
use crate::concepts::{build_corpus, EntityTriplet};
use crate::data::{write_jsonl, CategoryFile, GroundTruthSample, GtObject, WireSample};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::text_encoder::Vocab;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticShapesSpec {
    pub canvas: u32,
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    /// Categories ("color shape") excluded from every training concept set.
    pub heldout: Vec<String>,
    pub n_detection_train: usize,
    pub n_grounding_train: usize,
    pub n_imagetext: usize,
    pub n_heldout_val: usize,
    pub n_gen_val: usize,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for SyntheticShapesSpec {
    fn default() -> Self {
        SyntheticShapesSpec {
            canvas: 64,
            colors: vec!["red".into(), "green".into(), "blue".into(), "yellow".into()],
            shapes: vec!["square".into(), "circle".into(), "triangle".into(), "cross".into()],
            heldout: vec!["blue triangle".into(), "green circle".into()],
            n_detection_train: 160,
            n_grounding_train: 160,
            n_imagetext: 160,
            n_heldout_val: 32,
            n_gen_val: 32,
            max_objects: 3,
            seed: 7,
        }
    }
}

impl SyntheticShapesSpec {
    pub fn validate(&self) -> Result<()> {
        if self.canvas % 32 != 0 {
            return Err(Error::Config("canvas must be divisible by 32".into()));
        }
        let all = self.all_categories();
        for h in &self.heldout {
            if !all.contains(h) {
                return Err(Error::Config(format!("held-out category {h:?} not in the grid")));
            }
        }
        if self.train_categories().len() < 2 {
            return Err(Error::Config("need at least two training categories".into()));
        }
        Ok(())
    }

    pub fn all_categories(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.colors {
            for s in &self.shapes {
                out.push(format!("{c} {s}"));
            }
        }
        out
    }

    pub fn train_categories(&self) -> Vec<String> {
        self.all_categories()
            .into_iter()
            .filter(|c| !self.heldout.contains(c))
            .collect()
    }

    /// Definitions for a subset of categories, exercising the
    /// "name: definition" detection-text path.
    pub fn definitions(&self) -> BTreeMap<String, String> {
        let mut defs = BTreeMap::new();
        for cat in self.train_categories().iter().take(4) {
            let (color, shape) = cat.split_once(' ').expect("two-word category");
            defs.insert(cat.clone(), format!("a {shape} drawn in {color}"));
        }
        defs
    }
}

fn color_rgb(name: &str) -> Rgb<u8> {
    match name {
        "red" => Rgb([220, 40, 40]),
        "green" => Rgb([40, 200, 70]),
        "blue" => Rgb([60, 90, 230]),
        "yellow" => Rgb([230, 210, 60]),
        "purple" => Rgb([170, 60, 200]),
        "cyan" => Rgb([60, 210, 210]),
        _ => Rgb([200, 200, 200]),
    }
}

fn inside_shape(shape: &str, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        "square" => dx.abs() <= r && dy.abs() <= r,
        "circle" => dx * dx + dy * dy <= r * r,
        "triangle" => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        "cross" => {
            let arm = (r / 3.0).max(1.0);
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        _ => dx.abs() <= r && dy.abs() <= r,
    }
}

/// One rendered object instance.
#[derive(Clone, Debug)]
pub struct RenderedShape {
    pub triplet: EntityTriplet,
    pub bbox: BBox,
}

/// Renders a shape and returns its exact pixel-extent box (normalized).
fn draw_shape(
    img: &mut RgbImage,
    shape: &str,
    color: Rgb<u8>,
    cx: f64,
    cy: f64,
    r: f64,
) -> Option<BBox> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut min_x = i64::MAX;
    let mut min_y = i64::MAX;
    let mut max_x = i64::MIN;
    let mut max_y = i64::MIN;
    let x_lo = ((cx - r).floor() as i64).max(0);
    let x_hi = ((cx + r).ceil() as i64).min(w - 1);
    let y_lo = ((cy - r).floor() as i64).max(0);
    let y_hi = ((cy + r).ceil() as i64).min(h - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if inside_shape(shape, dx, dy, r) {
                img.put_pixel(x as u32, y as u32, color);
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
    }
    if min_x > max_x || min_y > max_y {
        return None;
    }
    Some(BBox::from_corners(
        min_x as f64 / w as f64,
        min_y as f64 / h as f64,
        (max_x + 1) as f64 / w as f64,
        (max_y + 1) as f64 / h as f64,
    ))
}

fn size_word(side: f64, canvas: f64) -> &'static str {
    if side / canvas < 0.28 {
        "small"
    } else {
        "large"
    }
}

/// Renders a scene with the given category pool; returns the image and its
/// exact ground truth.
pub fn render_scene(
    spec: &SyntheticShapesSpec,
    pool: &[String],
    rng: &mut ChaCha8Rng,
) -> (RgbImage, Vec<RenderedShape>) {
    let side = spec.canvas;
    let mut img = RgbImage::from_fn(side, side, |_, _| Rgb([24, 24, 26]));
    // mild background noise
    for p in img.pixels_mut() {
        let d = rng.gen_range(-6i16..=6) as i16;
        for c in 0..3 {
            p[c] = (p[c] as i16 + d).clamp(0, 255) as u8;
        }
    }
    let n = rng.gen_range(1..=spec.max_objects);
    let mut shapes = Vec::new();
    let mut attempts = 0;
    while shapes.len() < n && attempts < 60 {
        attempts += 1;
        let cat = &pool[rng.gen_range(0..pool.len())];
        let (color, shape) = cat.split_once(' ').expect("two-word category");
        let small = rng.gen_bool(0.5);
        let px_side = if small {
            rng.gen_range(11..=15) as f64
        } else {
            rng.gen_range(22..=30) as f64
        };
        let r = px_side / 2.0;
        let margin = r + 2.0;
        let cx = rng.gen_range(margin..side as f64 - margin);
        let cy = rng.gen_range(margin..side as f64 - margin);
        let proposed = BBox::from_corners(
            (cx - r) / side as f64,
            (cy - r) / side as f64,
            (cx + r) / side as f64,
            (cy + r) / side as f64,
        );
        if shapes
            .iter()
            .any(|s: &RenderedShape| iou(&s.bbox, &proposed) > 0.03)
        {
            continue;
        }
        if let Some(bbox) = draw_shape(&mut img, shape, color_rgb(color), cx, cy, r) {
            let word = size_word(px_side, side as f64);
            let triplet = EntityTriplet::new(
                &format!("{word} {color} {shape}"),
                cat,
                shape,
            )
            .expect("valid synthetic triplet");
            shapes.push(RenderedShape { triplet, bbox });
        }
    }
    (img, shapes)
}

fn phrase_list(shapes: &[RenderedShape]) -> String {
    shapes
        .iter()
        .map(|s| format!("a {}", s.triplet.phrase))
        .collect::<Vec<_>>()
        .join(" and ")
}

pub fn raw_caption(shapes: &[RenderedShape], rng: &mut ChaCha8Rng) -> String {
    let list = phrase_list(shapes);
    match rng.gen_range(0..4) {
        0 => format!("a photo of {list}"),
        1 => format!("picture with {list} somewhere"),
        2 => format!("my snapshot of {list} taken yesterday"),
        _ => list,
    }
}

pub fn refined_caption(shapes: &[RenderedShape]) -> String {
    format!("the image shows {}", phrase_list(shapes))
}

/// Everything the CLI writes into a dataset directory.
pub struct SynthOutput {
    pub images_written: usize,
    pub vocab_size: usize,
}

/// Generates the full benchmark into `out`: images, annotation JSONL files,
/// raw image-text pairs, the mock-LLM table, categories, vocabulary, and an
/// initial noun corpus. Deterministic for a fixed spec.
pub fn generate_dataset(spec: &SyntheticShapesSpec, out: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    std::fs::create_dir_all(out.join("images"))?;
    let train_pool = spec.train_categories();
    let heldout_pool = spec.heldout.clone();
    let mut images_written = 0usize;
    let mut all_triplets: Vec<EntityTriplet> = Vec::new();
    let mut mock = MockLlmClient::new("None");
    let mut vocab_universe: Vec<String> = Vec::new();

    let mut write_split = |split: &str,
                           count: usize,
                           pool: &[String],
                           seed_offset: u64,
                           with_caption: bool|
     -> Result<Vec<(GroundTruthSample, Vec<RenderedShape>)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(seed_offset));
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let (img, shapes) = render_scene(spec, pool, &mut rng);
            let image_id = format!("{split}_{i:05}");
            let image_path = format!("images/{image_id}.png");
            img.save(out.join(&image_path))?;
            images_written += 1;
            let caption = if with_caption { Some(refined_caption(&shapes)) } else { None };
            let sample = GroundTruthSample {
                image_id,
                image_path,
                objects: shapes
                    .iter()
                    .map(|s| GtObject { bbox: s.bbox, triplet: s.triplet.clone() })
                    .collect(),
                caption,
            };
            samples.push((sample, shapes));
        }
        Ok(samples)
    };

    let detection = write_split("det", spec.n_detection_train, &train_pool, 1, false)?;
    let grounding = write_split("grd", spec.n_grounding_train, &train_pool, 2, false)?;
    let imagetext = write_split("imt", spec.n_imagetext, &train_pool, 3, true)?;
    let heldout = write_split("hov", spec.n_heldout_val, &heldout_pool, 4, false)?;
    let genval = write_split("gen", spec.n_gen_val, &train_pool, 5, true)?;

    for (s, _) in detection.iter().chain(&grounding).chain(&imagetext).chain(&genval) {
        for o in &s.objects {
            all_triplets.push(o.triplet.clone());
        }
    }

    // raw image-text pairs plus the canned LLM responses derived from them
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(100));
    let mut raw_pairs = Vec::new();
    for (s, shapes) in &imagetext {
        let raw = raw_caption(shapes, &mut rng);
        let refined = refined_caption(shapes);
        mock.insert(&build_recaption_prompt(&raw), &refined);
        // a small slice of pairs exercises the non-entity filter path
        if rng.gen_range(0..100) < 4 {
            mock.insert(&build_filter_prompt(&refined), "None");
        } else {
            mock.insert(&build_filter_prompt(&refined), &refined);
            let lines: Vec<String> = shapes
                .iter()
                .enumerate()
                .map(|(i, sh)| format_entity_line(i + 1, &sh.triplet))
                .collect();
            mock.insert(&build_entity_prompt(&refined), &lines.join("\n"));
        }
        vocab_universe.push(raw.clone());
        vocab_universe.push(refined.clone());
        raw_pairs.push(RawPair {
            image_id: s.image_id.clone(),
            image_path: s.image_path.clone(),
            raw_caption: raw,
        });
    }

    // vocabulary universe: labels, captions, definitions, specials
    for cat in spec.all_categories() {
        vocab_universe.push(cat);
    }
    for t in &all_triplets {
        vocab_universe.push(crate::concepts::format_object_groundtruth(t));
    }
    for (k, v) in spec.definitions() {
        vocab_universe.push(format!("{k}: {v}"));
    }
    vocab_universe.push("object".into());
    vocab_universe.push("|".into());
    vocab_universe.push("small large".into());
    let vocab = Vocab::build(vocab_universe);

    let to_wire = |v: &[(GroundTruthSample, Vec<RenderedShape>)]| -> Vec<WireSample> {
        v.iter().map(|(s, _)| s.to_wire()).collect()
    };
    write_jsonl(&out.join("detection_train.jsonl"), &to_wire(&detection))?;
    write_jsonl(&out.join("grounding_train.jsonl"), &to_wire(&grounding))?;
    write_jsonl(&out.join("imagetext_raw.jsonl"), &raw_pairs)?;
    // reference annotations for the image-text split (pipeline diagnostics)
    write_jsonl(&out.join("imagetext_ref.jsonl"), &to_wire(&imagetext))?;
    write_jsonl(&out.join("heldout_val.jsonl"), &to_wire(&heldout))?;
    write_jsonl(&out.join("genval.jsonl"), &to_wire(&genval))?;
    mock.save(&out.join("mock_llm.json"))?;
    vocab.save(&out.join("vocab.txt"))?;
    CategoryFile {
        train: train_pool.clone(),
        heldout: heldout_pool.clone(),
        definitions: spec.definitions(),
    }
    .save(&out.join("categories.json"))?;
    // initial noun corpus from training annotations; the annotation pipeline
    // rebuilds it from extracted entities later
    let corpus = build_corpus(all_triplets, 1);
    corpus.save(&out.join("corpus.tsv"))?;

    Ok(SynthOutput { images_written, vocab_size: vocab.size() })
}
