//! The detect-and-match network: multi-modal video encoder, multi-modal SFX
//! encoder with the trainable no-SFX embedding, and a query-based decoder
//! emitting spans plus moment embeddings.

pub mod decoder;
pub mod sfx_encoder;
pub mod video_encoder;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rngutil;
use crate::tensor::blocks::{self, BlockConfig};
use crate::tensor::{checkpoint, ParamStore};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub d_v: usize,
    pub d_t: usize,
    pub d_a: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Number of learnable decoder queries (p).
    pub n_queries: usize,
    pub max_frames: usize,
    pub max_subtitles: usize,
    pub dropout: f64,
    /// Softmax temperature for prediction confidences.
    pub conf_temperature: f64,
    /// IoU threshold for non-maximum suppression at inference.
    pub nms_iou: f64,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_v: 512,
            d_t: 512,
            d_a: 768,
            d_model: 256,
            n_heads: 4,
            ffn_mult: 4,
            enc_layers: 2,
            dec_layers: 2,
            n_queries: 10,
            // Wide enough that the default synthetic videos keep one token
            // per frame; the 12/40 production setting stays configurable.
            max_frames: 64,
            max_subtitles: 40,
            dropout: 0.1,
            conf_temperature: 0.07,
            nms_iou: 0.3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn encoder_block(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            ffn_mult: self.ffn_mult,
            layers: self.enc_layers,
            dropout: self.dropout,
        }
    }

    pub fn decoder_block(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            ffn_mult: self.ffn_mult,
            layers: self.dec_layers,
            dropout: self.dropout,
        }
    }
}

/// Which input modalities are zeroed out, for the ablation switches.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ModalityMask {
    pub frames: bool,
    pub subtitles: bool,
    pub audio: bool,
    pub description: bool,
    pub tag: bool,
}

#[derive(Clone)]
pub struct DmModel {
    pub cfg: ModelConfig,
    pub store: ParamStore<f32>,
}

impl DmModel {
    pub fn new(cfg: ModelConfig) -> Self {
        let mut rng = rngutil::rng_for(cfg.seed, 10);
        let mut store = ParamStore::<f32>::new();
        let d = cfg.d_model;

        blocks::init_linear(&mut store, "video.frame_proj", cfg.d_v, d, &mut rng);
        blocks::init_linear(&mut store, "video.sub_proj", cfg.d_t, d, &mut rng);
        store.insert_normal("video.type_embed", 2, d, 0.02, &mut rng);
        blocks::init_encoder(&mut store, "encoder", &cfg.encoder_block(), &mut rng);

        store.insert_normal("decoder.queries", cfg.n_queries, d, 0.02, &mut rng);
        blocks::init_decoder(&mut store, "decoder", &cfg.decoder_block(), &mut rng);
        blocks::init_linear(&mut store, "decoder.mlp_loc.1", d, d, &mut rng);
        blocks::init_linear(&mut store, "decoder.mlp_loc.2", d, 2, &mut rng);
        blocks::init_linear(&mut store, "decoder.mlp_emb.1", d, d, &mut rng);
        blocks::init_linear(&mut store, "decoder.mlp_emb.2", d, d, &mut rng);

        blocks::init_linear(&mut store, "sfx.fc1", cfg.d_a + cfg.d_t, d, &mut rng);
        blocks::init_linear(&mut store, "sfx.fc2", d, d, &mut rng);
        store.insert_normal("sfx.tag_embed", 6, d, 0.02, &mut rng);
        store.insert_normal("sfx.s0", 1, d, 0.02, &mut rng);

        DmModel { cfg, store }
    }

    /// Pre-training touches everything except the decoder stack and its
    /// two prediction MLPs.
    pub fn is_pretrain_param(name: &str) -> bool {
        !name.starts_with("decoder.")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_value(&self.cfg)?;
        checkpoint::save(path, &self.store, &cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, cfg_json) = checkpoint::load(path)?;
        let cfg: ModelConfig = serde_json::from_value(cfg_json)?;
        Ok(DmModel { cfg, store })
    }
}
