//! All trainable weights of the system in one parameter store.

use crate::augmenter::AugmenterParams;
use crate::encoder::{EncoderParams, ModelConfig};
use crate::error::Result;
use crate::numkernel::{ParamId, ParamStore};
use crate::recommender::RecommenderParams;

pub const ENCODER_PREFIX: &str = "enc.";
pub const AUGMENTER_PREFIX: &str = "aug.";
pub const RECOMMENDER_PREFIX: &str = "rec.";

/// Shared encoder, augmenter and recommender weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub enc: EncoderParams,
    pub aug: AugmenterParams,
    pub rec: RecommenderParams,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let enc = EncoderParams::register(&mut store, &cfg, seed)?;
        let aug = AugmenterParams::register(&mut store, &cfg, seed)?;
        let rec = RecommenderParams::register(&mut store, &cfg, seed)?;
        Ok(Model { cfg, store, enc, aug, rec })
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix(ENCODER_PREFIX)
    }

    pub fn augmenter_params(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix(AUGMENTER_PREFIX)
    }

    pub fn recommender_params(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix(RECOMMENDER_PREFIX)
    }
}
