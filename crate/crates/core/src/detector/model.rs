//! Detector forward passes over the autodiff graph.

use image::RgbImage;

use crate::autodiff::Var;
use crate::detector::deformable::{deform_attention, init_deform_attention, DeformCfg, RefSpec};
use crate::detector::{DetectorCfg, ObjectQuery};
use crate::geometry::BBox;
use crate::nn::{ffn, layer_norm, linear, self_attention, Init, ParamStore, Session};
use crate::tensor::{inverse_sigmoid, Tensor};
use crate::text_encoder::similarity_var;

pub const DET_PREFIX: &str = "det";

pub fn init_detector(init: &mut Init, store: &mut ParamStore, cfg: &DetectorCfg) {
    let d = cfg.dim;
    let n_levels = cfg.strides.len();
    let dcfg = DeformCfg { dim: d, heads: cfg.heads, points: cfg.points };
    for (i, &s) in cfg.strides.iter().enumerate() {
        let p = format!("{DET_PREFIX}.bb{i}");
        init.linear(store, &format!("{p}.embed"), s * s * 3, d);
        init.layer_norm(store, &format!("{p}.ln1"), d);
        init.linear(store, &format!("{p}.mlp"), d, d);
        init.layer_norm(store, &format!("{p}.ln2"), d);
    }
    for l in 0..cfg.enc_layers {
        let p = format!("{DET_PREFIX}.enc.l{l}");
        init.layer_norm(store, &format!("{p}.ln1"), d);
        init_deform_attention(init, store, &format!("{p}.attn"), &dcfg, n_levels);
        init.layer_norm(store, &format!("{p}.ln2"), d);
        init.ffn(store, &format!("{p}.ffn"), d, cfg.ffn_hidden);
    }
    init.layer_norm(store, &format!("{DET_PREFIX}.enc.ln_out"), d);
    init.linear_zero(store, &format!("{DET_PREFIX}.enc.proposal"), d, 4);
    init.linear(store, &format!("{DET_PREFIX}.enc.align"), d, d);
    init.embedding(store, &format!("{DET_PREFIX}.dec.query_embed"), cfg.queries, d);
    for l in 0..cfg.dec_layers {
        let p = format!("{DET_PREFIX}.dec.l{l}");
        init.layer_norm(store, &format!("{p}.ln1"), d);
        init.self_attention(store, &format!("{p}.sa"), d);
        init.layer_norm(store, &format!("{p}.ln2"), d);
        init_deform_attention(init, store, &format!("{p}.ca"), &dcfg, n_levels);
        init.layer_norm(store, &format!("{p}.ln3"), d);
        init.ffn(store, &format!("{p}.ffn"), d, cfg.ffn_hidden);
    }
    init.layer_norm(store, &format!("{DET_PREFIX}.dec.ln_out"), d);
    init.linear(store, &format!("{DET_PREFIX}.dec.box.fc1"), d, d);
    init.linear_zero(store, &format!("{DET_PREFIX}.dec.box.fc2"), d, 4);
    init.linear(store, &format!("{DET_PREFIX}.dec.align"), d, d);
}

/// Flattens one image into per-level patch matrices (constant inputs).
fn patchify(image: &RgbImage, stride: usize) -> (Tensor, usize, usize) {
    let (w, h) = (image.width() as usize, image.height() as usize);
    assert!(
        w % stride == 0 && h % stride == 0,
        "image {w}x{h} not divisible by stride {stride}"
    );
    let (gw, gh) = (w / stride, h / stride);
    let mut rows = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut patch = Vec::with_capacity(stride * stride * 3);
            for py in 0..stride {
                for px in 0..stride {
                    let p = image.get_pixel((gx * stride + px) as u32, (gy * stride + py) as u32);
                    patch.push(p[0] as f64 / 255.0);
                    patch.push(p[1] as f64 / 255.0);
                    patch.push(p[2] as f64 / 255.0);
                }
            }
            rows.push(patch);
        }
    }
    (Tensor::from_rows(&rows), gh, gw)
}

/// Multi-scale feature maps from the patch backbone.
pub struct BackboneMaps {
    pub levels: Vec<Var>,
    pub shapes: Vec<(usize, usize)>,
}

pub fn backbone_forward(sess: &mut Session, cfg: &DetectorCfg, image: &RgbImage) -> BackboneMaps {
    let mut levels = Vec::new();
    let mut shapes = Vec::new();
    for (i, &s) in cfg.strides.iter().enumerate() {
        let (patches, gh, gw) = patchify(image, s);
        let p = format!("{DET_PREFIX}.bb{i}");
        let x = sess.g.constant(patches);
        let x = linear(sess, &format!("{p}.embed"), x);
        let x = layer_norm(sess, &format!("{p}.ln1"), x);
        let x = sess.g.gelu(x);
        let x = linear(sess, &format!("{p}.mlp"), x);
        let x = layer_norm(sess, &format!("{p}.ln2"), x);
        levels.push(x);
        shapes.push((gh, gw));
    }
    BackboneMaps { levels, shapes }
}

/// Encoder output: fused tokens, their reference points, and per-token
/// coordinate proposals (center form, sigmoid space).
pub struct PixelFeatures {
    pub tokens: Var,
    pub level_shapes: Vec<(usize, usize)>,
    pub level_offsets: Vec<usize>,
    pub refs: Vec<(f64, f64)>,
    pub ref_levels: Vec<usize>,
    pub proposals: Var,
}

impl PixelFeatures {
    pub fn token_count(&self) -> usize {
        self.refs.len()
    }

    /// Current token rows split back into per-level maps.
    pub fn level_slices(&self, sess: &mut Session) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.level_shapes.len());
        for (i, &(h, w)) in self.level_shapes.iter().enumerate() {
            let start = self.level_offsets[i];
            out.push(sess.g.slice_rows(self.tokens, start, start + h * w));
        }
        out
    }

    /// Base box (center form) for a token: its cell center and cell size.
    pub fn base_box(&self, token: usize) -> [f64; 4] {
        let (x, y) = self.refs[token];
        let (gh, gw) = self.level_shapes[self.ref_levels[token]];
        [x, y, 1.0 / gw as f64, 1.0 / gh as f64]
    }
}

pub fn pixel_encoder(sess: &mut Session, cfg: &DetectorCfg, maps: BackboneMaps) -> PixelFeatures {
    let n_levels = maps.levels.len();
    let dcfg = DeformCfg { dim: cfg.dim, heads: cfg.heads, points: cfg.points };
    let mut refs = Vec::new();
    let mut ref_levels = Vec::new();
    let mut level_offsets = Vec::new();
    let mut offset = 0;
    for (li, &(gh, gw)) in maps.shapes.iter().enumerate() {
        level_offsets.push(offset);
        offset += gh * gw;
        for gy in 0..gh {
            for gx in 0..gw {
                refs.push(((gx as f64 + 0.5) / gw as f64, (gy as f64 + 0.5) / gh as f64));
                ref_levels.push(li);
            }
        }
    }
    let mut x = sess.g.concat_rows(&maps.levels);
    for l in 0..cfg.enc_layers {
        let p = format!("{DET_PREFIX}.enc.l{l}");
        let h = layer_norm(sess, &format!("{p}.ln1"), x);
        let value_levels: Vec<Var> = {
            let mut vs = Vec::with_capacity(n_levels);
            for (i, &(gh, gw)) in maps.shapes.iter().enumerate() {
                let start = level_offsets[i];
                vs.push(sess.g.slice_rows(h, start, start + gh * gw));
            }
            vs
        };
        let a = deform_attention(
            sess,
            &format!("{p}.attn"),
            &dcfg,
            h,
            &RefSpec::Points(refs.clone()),
            &value_levels,
            &maps.shapes,
        );
        x = sess.g.add(x, a);
        let h = layer_norm(sess, &format!("{p}.ln2"), x);
        let f = ffn(sess, &format!("{p}.ffn"), h);
        x = sess.g.add(x, f);
    }
    let tokens = layer_norm(sess, &format!("{DET_PREFIX}.enc.ln_out"), x);

    // coordinate proposals: reference point plus a zero-initialized delta,
    // refined in inverse-sigmoid space
    let t = refs.len();
    let mut base = Tensor::zeros(vec![t, 4]);
    for (i, &(rx, ry)) in refs.iter().enumerate() {
        let (gh, gw) = maps.shapes[ref_levels[i]];
        base.data_mut()[i * 4] = inverse_sigmoid(rx);
        base.data_mut()[i * 4 + 1] = inverse_sigmoid(ry);
        base.data_mut()[i * 4 + 2] = inverse_sigmoid(1.0 / gw as f64);
        base.data_mut()[i * 4 + 3] = inverse_sigmoid(1.0 / gh as f64);
    }
    let delta = linear(sess, &format!("{DET_PREFIX}.enc.proposal"), tokens);
    let base_var = sess.g.constant(base);
    let logits = sess.g.add(delta, base_var);
    let proposals = sess.g.sigmoid(logits);

    PixelFeatures {
        tokens,
        level_shapes: maps.shapes,
        level_offsets,
        refs,
        ref_levels,
        proposals,
    }
}

/// Encoder-side alignment logits for a set of concept embeddings.
pub fn encoder_alignment(sess: &mut Session, pix: &PixelFeatures, concepts: Var) -> Var {
    let feats = linear(sess, &format!("{DET_PREFIX}.enc.align"), pix.tokens);
    similarity_var(sess, feats, concepts)
}

/// Top-k token selection by max-over-concepts similarity.
pub struct QuerySelection {
    pub token_indices: Vec<usize>,
    pub init_boxes: Tensor,
    pub queries: Vec<ObjectQuery>,
    pub enc_logits: Var,
}

pub fn select_topk_queries(
    sess: &mut Session,
    _cfg: &DetectorCfg,
    pix: &PixelFeatures,
    concepts: Var,
    k: usize,
) -> QuerySelection {
    let t = pix.token_count();
    assert!(k <= t, "k={k} exceeds token count {t}");
    let enc_logits = encoder_alignment(sess, pix, concepts);
    let logits_val = sess.g.value(enc_logits);
    let scores: Vec<f64> = (0..t)
        .map(|r| {
            logits_val
                .row(r)
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let token_indices: Vec<usize> = order[..k].to_vec();

    let proposals = sess.g.value(pix.proposals);
    let mut init_rows = Vec::with_capacity(k);
    for &ti in &token_indices {
        init_rows.push(proposals.row(ti).to_vec());
    }
    let init_boxes = Tensor::from_rows(&init_rows);
    let embed = sess.p(&format!("{DET_PREFIX}.dec.query_embed"));
    let embed_val = sess.g.value(embed);
    let pool = embed_val.rows();
    let queries = (0..k)
        .map(|i| {
            let b = init_boxes.row(i);
            ObjectQuery {
                content: embed_val.row(i % pool).to_vec(),
                position: BBox::from_center(b[0], b[1], b[2], b[3]),
                layer: 0,
            }
        })
        .collect();
    QuerySelection { token_indices, init_boxes, queries, enc_logits }
}

/// All per-layer decoder outputs plus the encoder auxiliary pair.
pub struct DecoderOutputs {
    pub layer_boxes: Vec<Var>,
    pub layer_logits: Vec<Var>,
    pub final_feats: Var,
    pub final_align_feats: Var,
}

pub fn object_decoder(
    sess: &mut Session,
    cfg: &DetectorCfg,
    pix: &PixelFeatures,
    selection: &QuerySelection,
    concepts: Var,
) -> DecoderOutputs {
    let k = selection.token_indices.len();
    let dcfg = DeformCfg { dim: cfg.dim, heads: cfg.heads, points: cfg.points };
    let embed = sess.p(&format!("{DET_PREFIX}.dec.query_embed"));
    let mut x = sess.g.slice_rows(embed, 0, k);
    let mut boxes_prev = selection.init_boxes.clone();
    let value_levels = pix.level_slices(sess);
    let allow = vec![true; k * k];

    let mut layer_boxes = Vec::new();
    let mut layer_logits = Vec::new();
    let mut final_feats = x;
    let mut final_align = x;
    for l in 0..cfg.dec_layers {
        let p = format!("{DET_PREFIX}.dec.l{l}");
        let h = layer_norm(sess, &format!("{p}.ln1"), x);
        let sa = self_attention(sess, &format!("{p}.sa"), h, cfg.heads, &allow);
        x = sess.g.add(x, sa);

        let h = layer_norm(sess, &format!("{p}.ln2"), x);
        let ref_boxes: Vec<[f64; 4]> = (0..k)
            .map(|i| {
                let r = boxes_prev.row(i);
                [r[0], r[1], r[2], r[3]]
            })
            .collect();
        let ca = deform_attention(
            sess,
            &format!("{p}.ca"),
            &dcfg,
            h,
            &RefSpec::Boxes(ref_boxes),
            &value_levels,
            &pix.level_shapes,
        );
        x = sess.g.add(x, ca);

        let h = layer_norm(sess, &format!("{p}.ln3"), x);
        let f = ffn(sess, &format!("{p}.ffn"), h);
        x = sess.g.add(x, f);

        let out_f = layer_norm(sess, &format!("{DET_PREFIX}.dec.ln_out"), x);
        // box refinement in inverse-sigmoid space, reference detached
        let bh = linear(sess, &format!("{DET_PREFIX}.dec.box.fc1"), out_f);
        let bh = sess.g.gelu(bh);
        let delta = linear(sess, &format!("{DET_PREFIX}.dec.box.fc2"), bh);
        let mut base = Tensor::zeros(vec![k, 4]);
        for i in 0..k {
            for c in 0..4 {
                base.data_mut()[i * 4 + c] = inverse_sigmoid(boxes_prev.at2(i, c));
            }
        }
        let base_var = sess.g.constant(base);
        let logits = sess.g.add(delta, base_var);
        let boxes = sess.g.sigmoid(logits);

        let align_feats = linear(sess, &format!("{DET_PREFIX}.dec.align"), out_f);
        let align_logits = similarity_var(sess, align_feats, concepts);

        boxes_prev = sess.g.value(boxes).clone();
        layer_boxes.push(boxes);
        layer_logits.push(align_logits);
        final_feats = out_f;
        final_align = align_feats;
    }
    DecoderOutputs {
        layer_boxes,
        layer_logits,
        final_feats,
        final_align_feats: final_align,
    }
}

/// Full single-image detection forward: backbone, encoder, selection,
/// decoder, against pre-encoded concept embeddings.
pub struct DetectionForward {
    pub pix: PixelFeatures,
    pub selection: QuerySelection,
    pub decoder: DecoderOutputs,
}

pub fn detection_forward(
    sess: &mut Session,
    cfg: &DetectorCfg,
    image: &RgbImage,
    concepts: Var,
) -> DetectionForward {
    let maps = backbone_forward(sess, cfg, image);
    let pix = pixel_encoder(sess, cfg, maps);
    let k = cfg.queries.min(pix.token_count());
    let selection = select_topk_queries(sess, cfg, &pix, concepts, k);
    let decoder = object_decoder(sess, cfg, &pix, &selection, concepts);
    DetectionForward { pix, selection, decoder }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn tiny_cfg() -> DetectorCfg {
        DetectorCfg { dim: 16, heads: 2, ffn_hidden: 32, queries: 6, ..Default::default() }
    }

    fn store_for(cfg: &DetectorCfg) -> ParamStore {
        let mut store = ParamStore::new();
        let mut init = Init::new(5);
        init_detector(&mut init, &mut store, cfg);
        // similarity temperature lives with the text encoder
        init.scalar(&mut store, "text.log_tau", 0.0);
        store
    }

    fn flat_image(side: u32, v: u8) -> RgbImage {
        RgbImage::from_pixel(side, side, image::Rgb([v, v, v]))
    }

    #[test]
    fn backbone_shapes_follow_strides() {
        let cfg = tiny_cfg();
        let store = store_for(&cfg);
        let mut sess = Session::new(&store);
        let maps = backbone_forward(&mut sess, &cfg, &flat_image(64, 128));
        assert_eq!(maps.shapes, vec![(8, 8), (4, 4), (2, 2)]);
        let mut sess = Session::new(&store);
        let maps = backbone_forward(&mut sess, &cfg, &flat_image(128, 128));
        assert_eq!(maps.shapes, vec![(16, 16), (8, 8), (4, 4)]);
    }

    #[test]
    fn all_zero_image_gives_finite_features() {
        let cfg = tiny_cfg();
        let store = store_for(&cfg);
        let mut sess = Session::new(&store);
        let maps = backbone_forward(&mut sess, &cfg, &flat_image(64, 0));
        let pix = pixel_encoder(&mut sess, &cfg, maps);
        assert!(sess.g.value(pix.tokens).all_finite());
        assert!(sess.g.value(pix.proposals).all_finite());
        assert_eq!(pix.token_count(), 64 + 16 + 4);
    }

    #[test]
    fn proposals_in_unit_range_and_centers_equal_refs_at_zero_init() {
        let cfg = tiny_cfg();
        let store = store_for(&cfg);
        let mut sess = Session::new(&store);
        let maps = backbone_forward(&mut sess, &cfg, &flat_image(64, 77));
        let pix = pixel_encoder(&mut sess, &cfg, maps);
        let props = sess.g.value(pix.proposals);
        for i in 0..pix.token_count() {
            let r = props.row(i);
            for &v in r {
                assert!((0.0..=1.0).contains(&v));
            }
            // proposal head is zero-initialized, so centers equal refs
            let (rx, ry) = pix.refs[i];
            assert!((r[0] - rx).abs() < 1e-9);
            assert!((r[1] - ry).abs() < 1e-9);
        }
    }

    #[test]
    fn topk_selection_matches_sort_oracle() {
        let cfg = tiny_cfg();
        let store = store_for(&cfg);
        let mut sess = Session::new(&store);
        let maps = backbone_forward(&mut sess, &cfg, &flat_image(64, 45));
        let pix = pixel_encoder(&mut sess, &cfg, maps);
        let concepts = {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
            let mut t = Tensor::zeros(vec![5, cfg.dim]);
            for v in t.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            sess.g.leaf(t)
        };
        let k = 10;
        let sel = select_topk_queries(&mut sess, &cfg, &pix, concepts, k);
        // oracle: full sort of max-over-concept scores
        let logits = sess.g.value(sel.enc_logits);
        let t = pix.token_count();
        let mut scored: Vec<(usize, f64)> = (0..t)
            .map(|r| {
                (
                    r,
                    logits.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                )
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let want: Vec<usize> = scored[..k].iter().map(|&(i, _)| i).collect();
        assert_eq!(sel.token_indices, want);
        assert_eq!(sel.queries.len(), k);
        // k equal to token count selects everything, ordered by score
        let mut sess2 = Session::new(&store);
        let maps = backbone_forward(&mut sess2, &cfg, &flat_image(64, 45));
        let pix2 = pixel_encoder(&mut sess2, &cfg, maps);
        let c2 = sess2.g.leaf(Tensor::full(vec![2, cfg.dim], 0.3));
        let sel2 = select_topk_queries(&mut sess2, &cfg, &pix2, c2, pix2.token_count());
        assert_eq!(sel2.token_indices.len(), pix2.token_count());
    }

    #[test]
    fn decoder_output_shapes_and_valid_boxes() {
        let cfg = tiny_cfg();
        let store = store_for(&cfg);
        let mut sess = Session::new(&store);
        let concepts = sess.g.leaf(Tensor::full(vec![3, cfg.dim], 0.5));
        let fwd = detection_forward(&mut sess, &cfg, &flat_image(64, 200), concepts);
        assert_eq!(fwd.decoder.layer_boxes.len(), cfg.dec_layers);
        assert_eq!(fwd.decoder.layer_logits.len(), cfg.dec_layers);
        for (b, l) in fwd.decoder.layer_boxes.iter().zip(&fwd.decoder.layer_logits) {
            assert_eq!(sess.g.value(*b).shape(), &[cfg.queries, 4]);
            assert_eq!(sess.g.value(*l).shape(), &[cfg.queries, 3]);
            for i in 0..cfg.queries {
                let r = sess.g.value(*b).row(i);
                let bb = BBox::from_center(r[0], r[1], r[2], r[3]);
                assert!(bb.width() > 0.0 && bb.height() > 0.0);
            }
        }
    }

    #[test]
    fn zero_init_box_head_keeps_layer0_boxes_at_init_positions() {
        let cfg = tiny_cfg();
        let store = store_for(&cfg);
        // fc2 is zero-initialized at construction, so deltas are zero
        let mut sess = Session::new(&store);
        let concepts = sess.g.leaf(Tensor::full(vec![2, cfg.dim], 0.4));
        let fwd = detection_forward(&mut sess, &cfg, &flat_image(64, 90), concepts);
        let layer0 = sess.g.value(fwd.decoder.layer_boxes[0]);
        for i in 0..cfg.queries {
            for c in 0..4 {
                let init = fwd.selection.init_boxes.at2(i, c);
                assert!(
                    (layer0.at2(i, c) - init).abs() < 1e-9,
                    "query {i} coord {c}"
                );
            }
        }
    }
}
