//! The visual path: tiny per-level patch backbone, deformable-attention
//! pixel encoder with per-token coordinate proposals, text-guided top-k
//! query selection, and the box-refining object decoder.

pub mod deformable;
pub mod loss;
pub mod matching;
mod model;

pub use model::*;

use crate::geometry::BBox;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct DetectorCfg {
    pub dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub queries: usize,
    pub points: usize,
    pub strides: Vec<usize>,
    pub ffn_hidden: usize,
}

impl Default for DetectorCfg {
    fn default() -> Self {
        DetectorCfg {
            dim: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            queries: 20,
            points: 4,
            strides: vec![8, 16, 32],
            ffn_hidden: 128,
        }
    }
}

/// One decoder object query: learned content plus a positional box seeded
/// from the encoder's coordinate proposals.
#[derive(Clone, Debug)]
pub struct ObjectQuery {
    pub content: Vec<f64>,
    pub position: BBox,
    pub layer: usize,
}
