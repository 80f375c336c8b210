//! The object captioner: a multimodal transformer whose cross-attention is
//! deformable, consuming `[visual queries | task token | text]` under a
//! multimodal causal mask, trained with language modeling at object and
//! image level, and generating hierarchical labels at inference.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::concepts::{parse_object_groundtruth, EntityTriplet};
use crate::detector::deformable::{deform_attention, init_deform_attention, DeformCfg, RefSpec};
use crate::nn::{ffn, layer_norm, linear, self_attention, Init, ParamStore, Session};
use crate::tensor::{sigmoid, Tensor};
use crate::text_encoder::{encode_concepts, similarity, tokenize, TextEncoderCfg, Vocab, EOS, IMG, OBJ};

pub const CAP_PREFIX: &str = "cap";

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CaptionerCfg {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub points: usize,
    pub max_text_len: usize,
    pub img_queries: usize,
    pub ffn_hidden: usize,
}

impl Default for CaptionerCfg {
    fn default() -> Self {
        CaptionerCfg {
            dim: 64,
            heads: 4,
            layers: 2,
            points: 4,
            max_text_len: 32,
            img_queries: 32,
            ffn_hidden: 128,
        }
    }
}

pub fn init_captioner(
    init: &mut Init,
    store: &mut ParamStore,
    cfg: &CaptionerCfg,
    vocab_size: usize,
    n_levels: usize,
) {
    let d = cfg.dim;
    let dcfg = DeformCfg { dim: d, heads: cfg.heads, points: cfg.points };
    init.linear(store, &format!("{CAP_PREFIX}.q_proj"), d, d);
    init.embedding(store, &format!("{CAP_PREFIX}.tok_embed"), vocab_size, d);
    init.embedding(store, &format!("{CAP_PREFIX}.pos_embed"), cfg.max_text_len + 1, d);
    for l in 0..cfg.layers {
        let p = format!("{CAP_PREFIX}.l{l}");
        init.layer_norm(store, &format!("{p}.ln1"), d);
        init.self_attention(store, &format!("{p}.sa"), d);
        init.layer_norm(store, &format!("{p}.ln_ca"), d);
        init_deform_attention(init, store, &format!("{p}.ca"), &dcfg, n_levels);
        init.layer_norm(store, &format!("{p}.ln2"), d);
        init.ffn(store, &format!("{p}.ffn"), d, cfg.ffn_hidden);
    }
    init.layer_norm(store, &format!("{CAP_PREFIX}.ln_f"), d);
    init.linear(store, &format!("{CAP_PREFIX}.lm"), d, vocab_size);
    init.embedding(store, &format!("{CAP_PREFIX}.img_queries"), cfg.img_queries, d);
}

/// Boolean attention mask over `[queries | task token | text]`.
/// `n_text` counts the task token (text position 0) plus the text tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub n_queries: usize,
    pub n_text: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.n_queries + self.n_text
    }

    pub fn at(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.size() + j]
    }
}

/// Query positions attend only to query positions; task-token and text
/// positions attend to all queries plus text positions at or before
/// themselves. No query attends to any text position.
pub fn build_multimodal_causal_mask(n_queries: usize, n_text: usize) -> AttentionMask {
    let s = n_queries + n_text;
    let mut allowed = vec![false; s * s];
    for i in 0..s {
        for j in 0..s {
            let ok = if i < n_queries {
                j < n_queries
            } else {
                j < n_queries || j <= i
            };
            allowed[i * s + j] = ok;
        }
    }
    AttentionMask { n_queries, n_text, allowed }
}

/// Snapshot of encoder pixel features for reuse across generation steps.
#[derive(Clone, Debug)]
pub struct FrozenPixelFeatures {
    pub level_values: Vec<Tensor>,
    pub level_shapes: Vec<(usize, usize)>,
    pub refs: Vec<(f64, f64)>,
    pub ref_levels: Vec<usize>,
}

impl FrozenPixelFeatures {
    pub fn token_count(&self) -> usize {
        self.refs.len()
    }

    pub fn base_box(&self, token: usize) -> [f64; 4] {
        let (x, y) = self.refs[token];
        let (gh, gw) = self.level_shapes[self.ref_levels[token]];
        [x, y, 1.0 / gw as f64, 1.0 / gh as f64]
    }
}

/// Captioner transformer output.
pub struct CaptionerForward {
    /// `[1 + n_text_tokens, vocab]` next-token logits: row 0 sits on the
    /// task token, row i+1 on text token i.
    pub text_logits: Var,
    /// Final hidden states of the query positions, `[Q, D]`.
    pub query_states: Var,
}

/// Full forward pass. `query_feats` is `[Q, D]`, one reference box per
/// query; `task` is the OBJ or IMG token id; `text_ids` the teacher-forced
/// text prefix.
#[allow(clippy::too_many_arguments)]
pub fn captioner_forward(
    sess: &mut Session,
    cfg: &CaptionerCfg,
    query_feats: Var,
    ref_boxes: &[[f64; 4]],
    task: u32,
    text_ids: &[u32],
    pix_levels: &[Var],
    level_shapes: &[(usize, usize)],
) -> CaptionerForward {
    let q = sess.g.value(query_feats).rows();
    assert_eq!(ref_boxes.len(), q);
    assert!(text_ids.len() <= cfg.max_text_len);
    let n_text = 1 + text_ids.len();
    let s = q + n_text;
    let dcfg = DeformCfg { dim: cfg.dim, heads: cfg.heads, points: cfg.points };

    let qpart = linear(sess, &format!("{CAP_PREFIX}.q_proj"), query_feats);
    let ids: Vec<usize> = std::iter::once(task as usize)
        .chain(text_ids.iter().map(|&t| t as usize))
        .collect();
    let tok_embed = sess.p(&format!("{CAP_PREFIX}.tok_embed"));
    let pos_embed = sess.p(&format!("{CAP_PREFIX}.pos_embed"));
    let te = sess.g.select_rows(tok_embed, &ids);
    let pe = sess.g.select_rows(pos_embed, &(0..n_text).collect::<Vec<_>>());
    let text_part = sess.g.add(te, pe);
    let mut x = sess.g.concat_rows(&[qpart, text_part]);

    let mask = build_multimodal_causal_mask(q, n_text);
    for l in 0..cfg.layers {
        let p = format!("{CAP_PREFIX}.l{l}");
        let h = layer_norm(sess, &format!("{p}.ln1"), x);
        let sa = self_attention(sess, &format!("{p}.sa"), h, cfg.heads, &mask.allowed);
        x = sess.g.add(x, sa);

        // deformable cross-attention on query rows only
        let xq = sess.g.slice_rows(x, 0, q);
        let rest = sess.g.slice_rows(x, q, s);
        let hq = layer_norm(sess, &format!("{p}.ln_ca"), xq);
        let ca = deform_attention(
            sess,
            &format!("{p}.ca"),
            &dcfg,
            hq,
            &RefSpec::Boxes(ref_boxes.to_vec()),
            pix_levels,
            level_shapes,
        );
        let xq = sess.g.add(xq, ca);
        x = sess.g.concat_rows(&[xq, rest]);

        let h = layer_norm(sess, &format!("{p}.ln2"), x);
        let f = ffn(sess, &format!("{p}.ffn"), h);
        x = sess.g.add(x, f);
    }
    let x = layer_norm(sess, &format!("{CAP_PREFIX}.ln_f"), x);
    let query_states = sess.g.slice_rows(x, 0, q);
    let text_states = sess.g.slice_rows(x, q, s);
    let text_logits = linear(sess, &format!("{CAP_PREFIX}.lm"), text_states);
    CaptionerForward { text_logits, query_states }
}

/// Teacher-forced language-modeling loss for one (query, target) pair:
/// mean `-log p(token)` over the target tokens plus EOS.
fn lm_loss_single(
    sess: &mut Session,
    cfg: &CaptionerCfg,
    query_feat: Var,
    ref_box: [f64; 4],
    task: u32,
    target_ids: &[u32],
    pix_levels: &[Var],
    level_shapes: &[(usize, usize)],
) -> Var {
    let fwd = captioner_forward(
        sess,
        cfg,
        query_feat,
        &vec![ref_box; sess.g.value(query_feat).rows()],
        task,
        target_ids,
        pix_levels,
        level_shapes,
    );
    let log_probs = sess.g.log_softmax_rows(fwd.text_logits);
    let mut coords = Vec::with_capacity(target_ids.len() + 1);
    for (row, &tid) in target_ids.iter().enumerate() {
        coords.push((row, tid as usize));
    }
    coords.push((target_ids.len(), EOS as usize));
    let picked = sess.g.pick(log_probs, &coords);
    let s = sess.g.sum_all(picked);
    sess.g.mul_scalar(s, -1.0 / coords.len() as f64)
}

/// Object-level captioning loss over the positive (matched) queries.
/// Targets are the formatted ground-truth label strings. Returns the loss
/// and whether it was skipped for lack of matches.
#[allow(clippy::too_many_arguments)]
pub fn object_caption_loss(
    sess: &mut Session,
    cfg: &CaptionerCfg,
    vocab: &Vocab,
    items: &[(Var, [f64; 4], String)],
    pix_levels: &[Var],
    level_shapes: &[(usize, usize)],
) -> (Var, bool) {
    if items.is_empty() {
        return (sess.g.scalar(0.0), true);
    }
    let mut losses = Vec::with_capacity(items.len());
    for (feat, ref_box, target) in items {
        let ids = tokenize(vocab, target, cfg.max_text_len).ids;
        let l = lm_loss_single(sess, cfg, *feat, *ref_box, OBJ, &ids, pix_levels, level_shapes);
        losses.push(l);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = sess.g.add(total, l);
    }
    let total = sess.g.mul_scalar(total, 1.0 / items.len() as f64);
    (total, false)
}

/// Fixed reference indices for image-level queries: `n` equally spaced
/// positions over `t` encoder tokens.
pub fn image_query_reference_indices(t: usize, n: usize) -> Vec<usize> {
    assert!(t >= 1 && n >= 1);
    if n == 1 {
        return vec![0];
    }
    (0..n)
        .map(|i| ((i as f64) * (t as f64 - 1.0) / (n as f64 - 1.0)).round() as usize)
        .collect()
}

/// Image-level captioning loss with the 32 learnable image queries anchored
/// at equally spaced encoder reference points.
pub fn image_caption_loss(
    sess: &mut Session,
    cfg: &CaptionerCfg,
    vocab: &Vocab,
    caption: &str,
    pix_levels: &[Var],
    level_shapes: &[(usize, usize)],
    token_refs: &[(f64, f64)],
    ref_levels: &[usize],
) -> Var {
    let t = token_refs.len();
    let idx = image_query_reference_indices(t, cfg.img_queries);
    let ref_boxes: Vec<[f64; 4]> = idx
        .iter()
        .map(|&i| {
            let (x, y) = token_refs[i];
            let (gh, gw) = level_shapes[ref_levels[i]];
            [x, y, 1.0 / gw as f64, 1.0 / gh as f64]
        })
        .collect();
    let queries = sess.p(&format!("{CAP_PREFIX}.img_queries"));
    let ids = tokenize(vocab, caption, cfg.max_text_len).ids;
    let fwd = captioner_forward(sess, cfg, queries, &ref_boxes, IMG, &ids, pix_levels, level_shapes);
    let log_probs = sess.g.log_softmax_rows(fwd.text_logits);
    let mut coords = Vec::with_capacity(ids.len() + 1);
    for (row, &tid) in ids.iter().enumerate() {
        coords.push((row, tid as usize));
    }
    coords.push((ids.len(), EOS as usize));
    let picked = sess.g.pick(log_probs, &coords);
    let s = sess.g.sum_all(picked);
    sess.g.mul_scalar(s, -1.0 / coords.len() as f64)
}

/// A decoded hierarchical label with its generation log-probability and
/// re-calibrated objectness.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratedLabel {
    pub token_ids: Vec<u32>,
    pub text: String,
    pub triplet: Option<EntityTriplet>,
    pub log_prob: f64,
    pub objectness: f64,
}

/// Greedy (beam size 1) decoding until EOS or `max_len` tokens.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    store: &ParamStore,
    cfg: &CaptionerCfg,
    vocab: &Vocab,
    frozen: &FrozenPixelFeatures,
    query_feat: &Tensor,
    ref_box: [f64; 4],
    task: u32,
    max_len: usize,
) -> GeneratedLabel {
    let max_len = max_len.min(cfg.max_text_len);
    let mut ids: Vec<u32> = Vec::new();
    let mut log_prob = 0.0;
    while ids.len() < max_len {
        let mut sess = Session::new(store);
        let q = sess.g.leaf(query_feat.clone());
        let levels: Vec<Var> = frozen
            .level_values
            .iter()
            .map(|t| sess.g.constant(t.clone()))
            .collect();
        let fwd = captioner_forward(
            &mut sess,
            cfg,
            q,
            &vec![ref_box; query_feat.rows()],
            task,
            &ids,
            &levels,
            &frozen.level_shapes,
        );
        let log_probs = sess.g.log_softmax_rows(fwd.text_logits);
        let lp = sess.g.value(log_probs);
        let last = lp.row(lp.rows() - 1);
        let mut best = 0usize;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        log_prob += last[best];
        if best as u32 == EOS {
            break;
        }
        ids.push(best as u32);
    }
    let text = vocab.decode(&ids);
    let triplet = parse_object_groundtruth(&text);
    GeneratedLabel { token_ids: ids, text, triplet, log_prob, objectness: 0.0 }
}

/// Objectness re-calibration: sigmoid of the larger of the query's
/// similarities to its generated phrase and category. Malformed labels get 0.
pub fn recalibrate_objectness(
    store: &ParamStore,
    text_cfg: &TextEncoderCfg,
    vocab: &Vocab,
    query_align_feat: &Tensor,
    label: &GeneratedLabel,
    tau: f64,
) -> f64 {
    let Some(triplet) = &label.triplet else {
        return 0.0;
    };
    let texts = vec![triplet.phrase.clone(), triplet.category.clone()];
    let embeds = encode_concepts(store, vocab, text_cfg, &texts);
    let sims = similarity(query_align_feat, &embeds, tau);
    let best = sims.at2(0, 0).max(sims.at2(0, 1));
    sigmoid(best)
}
