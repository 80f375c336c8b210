//! The assembled model: detector, text encoder, and captioner sharing one
//! parameter store, plus the checkpoint archive format.

use std::io::{Read, Write};
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotation::{ConceptDetection, ConceptDetector};
use crate::autodiff::Var;
use crate::captioner::{init_captioner, CaptionerCfg, FrozenPixelFeatures};
use crate::concepts::ConceptRecord;
use crate::detector::{detection_forward, init_detector, DetectionForward, DetectorCfg};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{hex_digest, Init, ParamStore, Session};
use crate::tensor::{sigmoid, Tensor};
use crate::text_encoder::{
    encode_concepts, encode_concepts_var, init_text_encoder, similarity, TextEncoderCfg, Vocab,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub detector: DetectorCfg,
    pub text: TextEncoderCfg,
    pub captioner: CaptionerCfg,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            detector: DetectorCfg::default(),
            text: TextEncoderCfg::default(),
            captioner: CaptionerCfg::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(self).expect("config serializes").as_bytes());
        hex_digest(&h.finalize())
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
}

impl Model {
    /// Builds a freshly initialized model. Parameter creation order is fixed,
    /// so a given (config, vocab, seed) always produces the same weights.
    pub fn new(cfg: ModelConfig, vocab: Vocab) -> Model {
        let mut store = ParamStore::new();
        let mut init = Init::new(cfg.seed);
        init_detector(&mut init, &mut store, &cfg.detector);
        init_text_encoder(&mut init, &mut store, &cfg.text, vocab.size());
        init_captioner(
            &mut init,
            &mut store,
            &cfg.captioner,
            vocab.size(),
            cfg.detector.strides.len(),
        );
        Model { cfg, vocab, params: store }
    }

    pub fn tau(&self) -> f64 {
        crate::text_encoder::current_tau(&self.params)
    }

    /// Unit-norm embeddings for a list of concept texts (inference mode).
    pub fn encode_concepts(&self, texts: &[String]) -> Tensor {
        encode_concepts(&self.params, &self.vocab, &self.cfg.text, texts)
    }

    pub fn encode_concept_records(&self, records: &[ConceptRecord]) -> Tensor {
        let texts: Vec<String> = records.iter().map(|r| r.encoder_text()).collect();
        self.encode_concepts(&texts)
    }

    /// Graph-mode concept encoding (training).
    pub fn encode_concepts_graph(&self, sess: &mut Session, texts: &[String]) -> Var {
        encode_concepts_var(sess, &self.cfg.text, &self.vocab, texts)
    }

    /// Full detection forward in an existing session against already-encoded
    /// concepts.
    pub fn detection_forward_graph(
        &self,
        sess: &mut Session,
        image: &RgbImage,
        concepts: Var,
    ) -> DetectionForward {
        detection_forward(sess, &self.cfg.detector, image, concepts)
    }

    /// Inference-only forward; returns a value snapshot of everything the
    /// downstream protocols need.
    pub fn detect_snapshot(&self, image: &RgbImage, concept_embeds: &Tensor) -> DetectSnapshot {
        let mut sess = Session::new(&self.params);
        let concepts = sess.g.constant(concept_embeds.clone());
        let fwd = detection_forward(&mut sess, &self.cfg.detector, image, concepts);
        let last_boxes = sess.g.value(*fwd.decoder.layer_boxes.last().expect("decoder layers"));
        let boxes: Vec<BBox> = (0..last_boxes.rows())
            .map(|i| {
                let r = last_boxes.row(i);
                BBox::from_center(r[0], r[1], r[2], r[3]).clip_unit()
            })
            .collect();
        let align_feats = sess.g.value(fwd.decoder.final_align_feats).clone();
        let final_feats = sess.g.value(fwd.decoder.final_feats).clone();
        let raw_boxes: Vec<[f64; 4]> = (0..last_boxes.rows())
            .map(|i| {
                let r = last_boxes.row(i);
                [r[0], r[1], r[2], r[3]]
            })
            .collect();
        let level_values = fwd
            .pix
            .level_slices(&mut sess)
            .into_iter()
            .map(|v| sess.g.value(v).clone())
            .collect();
        DetectSnapshot {
            boxes,
            raw_boxes,
            align_feats,
            final_feats,
            frozen: FrozenPixelFeatures {
                level_values,
                level_shapes: fwd.pix.level_shapes.clone(),
                refs: fwd.pix.refs.clone(),
                ref_levels: fwd.pix.ref_levels.clone(),
            },
        }
    }

    /// Scores of every query against every concept embedding: sigmoid of the
    /// scaled alignment similarity.
    pub fn query_concept_scores(&self, snapshot: &DetectSnapshot, embeds: &Tensor) -> Tensor {
        let logits = similarity(&snapshot.align_feats, embeds, self.tau());
        logits.map(sigmoid)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(self, path)
    }

    pub fn load(path: &Path) -> Result<Model> {
        load_checkpoint(path)
    }
}

/// Value snapshot of one image's detection forward.
pub struct DetectSnapshot {
    pub boxes: Vec<BBox>,
    /// Final-layer boxes in center form (unclipped), one per query.
    pub raw_boxes: Vec<[f64; 4]>,
    pub align_feats: Tensor,
    pub final_feats: Tensor,
    pub frozen: FrozenPixelFeatures,
}

impl ConceptDetector for Model {
    /// Best concept per query box, scored with the alignment similarity.
    fn detect_concepts(&self, image: &RgbImage, concepts: &[String]) -> Vec<ConceptDetection> {
        if concepts.is_empty() {
            return Vec::new();
        }
        let embeds = self.encode_concepts(concepts);
        let snapshot = self.detect_snapshot(image, &embeds);
        let scores = self.query_concept_scores(&snapshot, &embeds);
        (0..snapshot.boxes.len())
            .map(|q| {
                let row = scores.row(q);
                let mut best = 0usize;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                ConceptDetection { bbox: snapshot.boxes[q], concept: best, score: row[best] }
            })
            .collect()
    }
}

// ---- checkpoint archive ----

const MAGIC: &[u8; 4] = b"GDCK";

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    config_hash: String,
    vocab_words: Vec<String>,
    params: Vec<ParamRecord>,
}

/// Writes a flat named-parameter archive: magic, manifest length, JSON
/// manifest, then raw little-endian f64 data.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut records = Vec::new();
    let mut offset = 0usize;
    for (name, value) in model.params.iter() {
        records.push(ParamRecord {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            offset,
        });
        offset += value.len();
    }
    let manifest = Manifest {
        version: 1,
        config: model.cfg.clone(),
        config_hash: model.cfg.hash(),
        vocab_words: vocab_words_in_order(&model.vocab),
        params: records,
    };
    let manifest_json = serde_json::to_vec(&manifest)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    f.write_all(&manifest_json)?;
    for (_, value) in model.params.iter() {
        for v in value.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn vocab_words_in_order(vocab: &Vocab) -> Vec<String> {
    // vocabulary words in id order (specials and bytes are implicit)
    let mut words = Vec::new();
    let base = 4 + 256;
    for i in base..vocab.size() {
        words.push(vocab.token_text(i as u32));
    }
    words
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("open {}: {e}", path.display())))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let mlen = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_json = vec![0u8; mlen];
    f.read_exact(&mut manifest_json)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_json)?;
    if manifest.config_hash != manifest.config.hash() {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }
    let mut raw = Vec::new();
    f.read_to_end(&mut raw)?;
    if raw.len() % 8 != 0 {
        return Err(Error::Checkpoint("truncated parameter data".into()));
    }
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut store = ParamStore::new();
    for rec in &manifest.params {
        let n: usize = rec.shape.iter().product();
        if rec.offset + n > data.len() {
            return Err(Error::Checkpoint(format!("parameter {} out of range", rec.name)));
        }
        store.insert(
            &rec.name,
            Tensor::new(rec.shape.clone(), data[rec.offset..rec.offset + n].to_vec()),
        );
    }
    let vocab = Vocab::build(manifest.vocab_words.clone());
    let model = Model { cfg: manifest.config, vocab, params: store };
    Ok(model)
}
