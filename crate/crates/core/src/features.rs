//! Common interface of the patch-pair embeddings (learned and PCA).

use rayon::prelude::*;

use crate::dcae::DcaeModel;
use crate::error::Result;
use crate::patches::{PatchPair, Preset};

pub trait Embedder: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, pair: &PatchPair) -> Result<Vec<f32>>;

    /// Embedding of an all-zero patch pair (no signal at either scale).
    fn empty_signal(&self, preset: Preset) -> Result<Vec<f32>> {
        let n = preset.side() * preset.side();
        self.embed(&PatchPair {
            scale1: vec![0.0; n],
            scale2: vec![0.0; n],
            source: Default::default(),
        })
    }
}

impl Embedder for DcaeModel {
    fn dim(&self) -> usize {
        self.feature_dim()
    }

    fn embed(&self, pair: &PatchPair) -> Result<Vec<f32>> {
        self.extract_features(pair)
    }
}

/// Embeds every pair in parallel, keeping input order.
pub fn embed_all<E: Embedder + ?Sized>(embedder: &E, pairs: &[PatchPair]) -> Result<Vec<Vec<f32>>> {
    pairs.par_iter().map(|p| embedder.embed(p)).collect()
}
