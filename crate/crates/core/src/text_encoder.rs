//! The detector's text path: tokenization over a corpus-derived vocabulary
//! with byte fallback, a tiny transformer encoder producing unit-norm concept
//! embeddings, and scaled query/concept similarity.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::autodiff::Var;
use crate::concepts::normalize_text;
use crate::error::{Error, Result};
use crate::nn::{ffn, layer_norm, linear, self_attention, transpose, Init, ParamStore, Session};
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const OBJ: u32 = 2;
pub const IMG: u32 = 3;
const N_SPECIALS: u32 = 4;
const N_BYTES: u32 = 256;

/// Whitespace word-piece vocabulary with single-byte fallback for unknown
/// words. Ids 0..4 are specials, 4..260 are bytes, the rest are words.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocab {
    /// Builds from a word universe (deduplicated, sorted for determinism).
    pub fn build<I: IntoIterator<Item = String>>(universe: I) -> Self {
        let mut words: Vec<String> = universe
            .into_iter()
            .flat_map(|s| {
                normalize_text(&s)
                    .split(' ')
                    .filter(|w| !w.is_empty())
                    .map(|w| w.to_string())
                    .collect::<Vec<_>>()
            })
            .collect();
        words.sort();
        words.dedup();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), N_SPECIALS + N_BYTES + i as u32))
            .collect();
        Vocab { words, index }
    }

    pub fn size(&self) -> usize {
        (N_SPECIALS + N_BYTES) as usize + self.words.len()
    }

    pub fn word_id(&self, w: &str) -> Option<u32> {
        self.index.get(w).copied()
    }

    /// Token string for an id (used for decoding generations).
    pub fn token_text(&self, id: u32) -> String {
        match id {
            PAD => "[PAD]".to_string(),
            EOS => "[EOS]".to_string(),
            OBJ => "[OBJ]".to_string(),
            IMG => "[IMG]".to_string(),
            i if i < N_SPECIALS + N_BYTES => {
                format!("<0x{:02x}>", i - N_SPECIALS)
            }
            i => self.words[(i - N_SPECIALS - N_BYTES) as usize].clone(),
        }
    }

    /// Decodes a token sequence back into text. Byte tokens are reassembled;
    /// word tokens are joined with single spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut parts: Vec<String> = Vec::new();
        let mut byte_run: Vec<u8> = Vec::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            if id == PAD || id == OBJ || id == IMG {
                continue;
            }
            if id >= N_SPECIALS && id < N_SPECIALS + N_BYTES {
                byte_run.push((id - N_SPECIALS) as u8);
                continue;
            }
            if !byte_run.is_empty() {
                parts.push(String::from_utf8_lossy(&byte_run).into_owned());
                byte_run.clear();
            }
            parts.push(self.words[(id - N_SPECIALS - N_BYTES) as usize].clone());
        }
        if !byte_run.is_empty() {
            parts.push(String::from_utf8_lossy(&byte_run).into_owned());
        }
        parts.join(" ")
    }

    /// One token per line; line order fixes the word-id assignment.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for w in &self.words {
            writeln!(f, "{w}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut words = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            if !line.is_empty() {
                words.push(line);
            }
        }
        let sorted = {
            let mut c = words.clone();
            c.sort();
            c.dedup();
            c
        };
        if sorted != words {
            return Err(Error::Dataset("vocab file is not sorted/deduplicated".into()));
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), N_SPECIALS + N_BYTES + i as u32))
            .collect();
        Ok(Vocab { words, index })
    }
}

/// Token ids for one text, already truncated to its maximum length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

/// Deterministic whitespace word-piece tokenization with byte fallback.
/// Empty text yields a single padding token.
pub fn tokenize(vocab: &Vocab, text: &str, max_len: usize) -> TokenSequence {
    let norm = normalize_text(text);
    let mut ids = Vec::new();
    for word in norm.split(' ').filter(|w| !w.is_empty()) {
        match vocab.word_id(word) {
            Some(id) => ids.push(id),
            None => ids.extend(word.bytes().map(|b| N_SPECIALS + b as u32)),
        }
    }
    ids.truncate(max_len);
    if ids.is_empty() {
        ids.push(PAD);
    }
    TokenSequence { ids }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TextEncoderCfg {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
}

impl Default for TextEncoderCfg {
    fn default() -> Self {
        TextEncoderCfg { dim: 64, heads: 4, layers: 2, max_len: 16 }
    }
}

pub const TEXT_PREFIX: &str = "text";

pub fn init_text_encoder(init: &mut Init, store: &mut ParamStore, cfg: &TextEncoderCfg, vocab_size: usize) {
    init.embedding(store, &format!("{TEXT_PREFIX}.tok_embed"), vocab_size, cfg.dim);
    init.embedding(store, &format!("{TEXT_PREFIX}.pos_embed"), cfg.max_len, cfg.dim);
    for l in 0..cfg.layers {
        let p = format!("{TEXT_PREFIX}.l{l}");
        init.layer_norm(store, &format!("{p}.ln1"), cfg.dim);
        init.self_attention(store, &format!("{p}.attn"), cfg.dim);
        init.layer_norm(store, &format!("{p}.ln2"), cfg.dim);
        init.ffn(store, &format!("{p}.ffn"), cfg.dim, cfg.dim * 2);
    }
    init.layer_norm(store, &format!("{TEXT_PREFIX}.ln_f"), cfg.dim);
    init.linear(store, &format!("{TEXT_PREFIX}.proj"), cfg.dim, cfg.dim);
    // similarity temperature, log-parameterized so it stays positive
    init.scalar(store, &format!("{TEXT_PREFIX}.log_tau"), (0.07f64).ln());
}

/// Encodes one token sequence to a unit-norm row `[1, D]`.
pub fn encode_tokens_var(sess: &mut Session, cfg: &TextEncoderCfg, tokens: &TokenSequence) -> Var {
    let t = tokens.ids.len().min(cfg.max_len);
    let ids: Vec<usize> = tokens.ids[..t].iter().map(|&i| i as usize).collect();
    let tok_embed = sess.p(&format!("{TEXT_PREFIX}.tok_embed"));
    let pos_embed = sess.p(&format!("{TEXT_PREFIX}.pos_embed"));
    let te = sess.g.select_rows(tok_embed, &ids);
    let pe = sess.g.select_rows(pos_embed, &(0..t).collect::<Vec<_>>());
    let mut x = sess.g.add(te, pe);
    let allow = vec![true; t * t];
    for l in 0..cfg.layers {
        let p = format!("{TEXT_PREFIX}.l{l}");
        let h = layer_norm(sess, &format!("{p}.ln1"), x);
        let h = self_attention(sess, &format!("{p}.attn"), h, cfg.heads, &allow);
        x = sess.g.add(x, h);
        let h = layer_norm(sess, &format!("{p}.ln2"), x);
        let h = ffn(sess, &format!("{p}.ffn"), h);
        x = sess.g.add(x, h);
    }
    let x = layer_norm(sess, &format!("{TEXT_PREFIX}.ln_f"), x);
    let pooled = sess.g.mean_rows(x);
    let pooled = sess.g.reshape(pooled, vec![1, cfg.dim]);
    let projected = linear(sess, &format!("{TEXT_PREFIX}.proj"), pooled);
    sess.g.l2_normalize_rows(projected, 1e-12)
}

/// Encodes a batch of texts; each row is computed independently, so batched
/// and one-at-a-time encoding agree bitwise.
pub fn encode_concepts_var(
    sess: &mut Session,
    cfg: &TextEncoderCfg,
    vocab: &Vocab,
    texts: &[String],
) -> Var {
    assert!(!texts.is_empty(), "encode_concepts on empty list");
    let rows: Vec<Var> = texts
        .iter()
        .map(|t| {
            let seq = tokenize(vocab, t, cfg.max_len);
            encode_tokens_var(sess, cfg, &seq)
        })
        .collect();
    sess.g.concat_rows(&rows)
}

/// Inference-mode encoding with plain tensors (fresh throwaway graph).
pub fn encode_concepts(
    store: &ParamStore,
    vocab: &Vocab,
    cfg: &TextEncoderCfg,
    texts: &[String],
) -> Tensor {
    assert!(!texts.is_empty(), "encode_concepts on empty list");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(texts.len());
    for t in texts {
        let mut sess = Session::new(store);
        let seq = tokenize(vocab, t, cfg.max_len);
        let v = encode_tokens_var(&mut sess, cfg, &seq);
        rows.push(sess.g.value(v).data().to_vec());
    }
    Tensor::from_rows(&rows)
}

/// Scaled dot products between L2-normalized query features and concept
/// embeddings: `logits[q][c] = (q_hat . e_c) / tau`.
pub fn similarity(query_features: &Tensor, concept_embeddings: &Tensor, tau: f64) -> Tensor {
    let q = query_features.rows();
    let c = concept_embeddings.rows();
    let d = query_features.cols();
    assert_eq!(concept_embeddings.cols(), d);
    let mut out = Tensor::zeros(vec![q, c]);
    for qi in 0..q {
        let row = query_features.row(qi);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for ci in 0..c {
            let e = concept_embeddings.row(ci);
            let dot: f64 = row.iter().zip(e).map(|(&a, &b)| a * b).sum();
            out.data_mut()[qi * c + ci] = dot / (norm * tau);
        }
    }
    out
}

/// Graph version of [`similarity`] with the learned temperature parameter.
pub fn similarity_var(sess: &mut Session, query_features: Var, concept_embeddings: Var) -> Var {
    let qn = sess.g.l2_normalize_rows(query_features, 1e-12);
    let et = transpose(sess, concept_embeddings);
    let dots = sess.g.matmul(qn, et);
    let log_tau = sess.p(&format!("{TEXT_PREFIX}.log_tau"));
    let neg = sess.g.neg(log_tau);
    let inv_tau = sess.g.exp(neg);
    sess.g.mul_scalar_var(dots, inv_tau)
}

/// The learned temperature value currently held by a parameter store.
pub fn current_tau(store: &ParamStore) -> f64 {
    store.get(&format!("{TEXT_PREFIX}.log_tau")).item().exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_vocab() -> Vocab {
        Vocab::build(vec![
            "small red square".to_string(),
            "large blue circle".to_string(),
            "green triangle".to_string(),
            "yellow cross shape".to_string(),
        ])
    }

    fn demo_store(cfg: &TextEncoderCfg, vocab: &Vocab) -> ParamStore {
        let mut store = ParamStore::new();
        let mut init = Init::new(17);
        init_text_encoder(&mut init, &mut store, cfg, vocab.size());
        store
    }

    #[test]
    fn tokenize_deterministic_and_truncating() {
        let vocab = demo_vocab();
        let a = tokenize(&vocab, "small red square", 16);
        let b = tokenize(&vocab, "small red square", 16);
        assert_eq!(a, b);
        assert_eq!(a.ids.len(), 3);
        let empty = tokenize(&vocab, "", 16);
        assert_eq!(empty.ids, vec![PAD]);
        let twenty = (0..20).map(|_| "red").collect::<Vec<_>>().join(" ");
        assert_eq!(tokenize(&vocab, &twenty, 16).ids.len(), 16);
    }

    #[test]
    fn byte_fallback_round_trips_unknown_words() {
        let vocab = demo_vocab();
        let seq = tokenize(&vocab, "red pentagon", 32);
        assert!(seq.ids.len() > 2, "unknown word must expand into bytes");
        assert_eq!(vocab.decode(&seq.ids), "red pentagon");
    }

    #[test]
    fn vocab_save_load_round_trip() {
        let vocab = demo_vocab();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        vocab.save(&p).unwrap();
        let loaded = Vocab::load(&p).unwrap();
        assert_eq!(vocab, loaded);
    }

    #[test]
    fn embeddings_unit_norm_and_batch_independent() {
        let cfg = TextEncoderCfg::default();
        let vocab = demo_vocab();
        let store = demo_store(&cfg, &vocab);
        let texts: Vec<String> = vec![
            "red square".into(),
            "blue circle".into(),
            "green triangle".into(),
        ];
        let batched = encode_concepts(&store, &vocab, &cfg, &texts);
        for r in 0..batched.rows() {
            let norm: f64 = batched.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        for (i, t) in texts.iter().enumerate() {
            let single = encode_concepts(&store, &vocab, &cfg, &[t.clone()]);
            assert_eq!(single.row(0), batched.row(i), "batched vs single must be bitwise equal");
        }
        // permuting inputs permutes outputs
        let permuted = encode_concepts(
            &store,
            &vocab,
            &cfg,
            &[texts[2].clone(), texts[0].clone(), texts[1].clone()],
        );
        assert_eq!(permuted.row(0), batched.row(2));
        assert_eq!(permuted.row(1), batched.row(0));
    }

    #[test]
    fn similarity_identity_orthogonal_and_oracle() {
        let e = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let q = Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]);
        let s = similarity(&q, &e, 1.0);
        assert!((s.at2(0, 0) - 1.0).abs() < 1e-12, "identical unit vectors give logit 1");
        assert!(s.at2(0, 1).abs() < 1e-12, "orthogonal vectors give 0");

        // 3x4 hand oracle
        let q = Tensor::from_rows(&[
            vec![0.3, -0.7, 1.2],
            vec![1.0, 0.0, 0.0],
            vec![-0.2, 0.4, 0.9],
        ]);
        let e = Tensor::from_rows(&[
            vec![0.6, 0.8, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
        ]);
        let tau = 0.5;
        let s = similarity(&q, &e, tau);
        for qi in 0..3 {
            let row = q.row(qi);
            let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            for ci in 0..4 {
                let dot: f64 = row.iter().zip(e.row(ci)).map(|(&a, &b)| a * b).sum();
                let want = dot / (norm * tau);
                assert!((s.at2(qi, ci) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_columns_independent_of_batch() {
        let cfg = TextEncoderCfg::default();
        let vocab = demo_vocab();
        let store = demo_store(&cfg, &vocab);
        let all: Vec<String> = vec!["red square".into(), "blue circle".into(), "cross".into()];
        let e_all = encode_concepts(&store, &vocab, &cfg, &all);
        let e_one = encode_concepts(&store, &vocab, &cfg, &all[..1]);
        let q = Tensor::from_rows(&[vec![0.5; 64], vec![-0.25; 64]]);
        let s_all = similarity(&q, &e_all, 1.0);
        let s_one = similarity(&q, &e_one, 1.0);
        for r in 0..2 {
            assert_eq!(s_all.at2(r, 0), s_one.at2(r, 0), "column must be bitwise identical");
        }
    }
}
