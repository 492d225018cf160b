//! Latent-diffusion backbone adapter: image/latent codec, prompt
//! conditioning, noise prediction, frozen snapshots and low-rank adaptation.
//!
//! The `toy` backbone is a small seeded network that implements the full
//! adapter contract, including analytic gradients, on the CPU.

mod lora;
mod prompt;
pub mod toy;

use std::collections::BTreeMap;
use std::ops::Deref;
use std::sync::Arc;

pub(crate) use lora::flat_grads as lora_flat_grads;
pub use lora::{LoraConfig, LoraFactors, LoraSet, LoraTargetInfo};
pub use prompt::{HashTokenizer, PromptWithSlot, Slot, SLOT_MARKER};
pub use toy::{ToyBackbone, ToyConfig};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::latent::{LatentShape, LatentTensor};
use crate::mat::Matrix;
use crate::scheduler::NoiseSchedule;

/// Token-embedding sequence fed to the text encoder: one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub rows: Vec<Vec<f64>>,
}

impl Conditioning {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Replaces the embedding row of the slot bound to `concept` with `embedding`.
pub fn substitute_embedding(
    cond: &Conditioning,
    prompt: &PromptWithSlot,
    concept: &str,
    embedding: &[f64],
) -> Result<Conditioning> {
    let slot = prompt
        .slot_for(concept)
        .ok_or_else(|| Error::MissingSlot(concept.to_string()))?;
    let dim = cond.rows.first().map_or(0, Vec::len);
    if embedding.len() != dim {
        return Err(Error::EmbeddingDim {
            expected: dim,
            actual: embedding.len(),
        });
    }
    let mut out = cond.clone();
    out.rows[slot.position] = embedding.to_vec();
    Ok(out)
}

/// Inference surface every backbone provides.
pub trait Backbone: Send + Sync {
    fn id(&self) -> &str;
    fn latent_shape(&self) -> LatentShape;
    fn embed_dim(&self) -> usize;
    fn schedule(&self) -> &NoiseSchedule;
    fn tokenize(&self, template: &str) -> Result<PromptWithSlot>;
    /// Base-vocabulary embedding rows for `prompt`; slots hold the embedding
    /// of the literal marker until substituted.
    fn token_embeddings(&self, prompt: &PromptWithSlot) -> Conditioning;
    fn encode_image(&self, image: &RgbImage) -> Result<LatentTensor>;
    fn decode_latent(&self, latent: &LatentTensor) -> Result<RgbImage>;
    fn predict_noise(&self, x_t: &LatentTensor, t: usize, cond: &Conditioning) -> Result<LatentTensor>;
    /// Hex digest over every parameter, including low-rank deltas.
    fn param_hash(&self) -> String;
}

/// Gradients produced by a backward pass.
#[derive(Debug, Clone, Default)]
pub struct BackboneGrads {
    /// Per-token gradient with respect to the conditioning rows.
    pub cond: Vec<Vec<f64>>,
    /// Per-target gradients of the low-rank factors.
    pub lora: BTreeMap<String, LoraFactors>,
}

impl BackboneGrads {
    pub fn add_assign(&mut self, other: &BackboneGrads) {
        if self.cond.is_empty() {
            self.cond = other.cond.clone();
        } else {
            for (a, b) in self.cond.iter_mut().zip(&other.cond) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        for (name, g) in &other.lora {
            match self.lora.get_mut(name) {
                Some(acc) => {
                    acc.a.add_assign(&g.a);
                    acc.b.add_assign(&g.b);
                }
                None => {
                    self.lora.insert(name.clone(), g.clone());
                }
            }
        }
    }
}

/// Training surface: cached forward, reverse pass and low-rank deltas.
pub trait DifferentiableBackbone: Backbone + Clone {
    type Cache;

    fn forward(
        &self,
        x_t: &LatentTensor,
        t: usize,
        cond: &Conditioning,
    ) -> Result<(LatentTensor, Self::Cache)>;

    /// Propagates `grad_eps` (d loss / d predicted noise) back to the
    /// conditioning rows and, when `with_lora`, to the low-rank factors.
    fn backward(&self, cache: &Self::Cache, grad_eps: &LatentTensor, with_lora: bool) -> BackboneGrads;

    fn inject_lora(&mut self, cfg: &LoraConfig) -> Result<Vec<LoraTargetInfo>>;
    fn lora(&self) -> Option<&LoraSet>;
    fn lora_mut(&mut self) -> Option<&mut LoraSet>;

    /// Replaces the low-rank factors wholesale (checkpoint restore).
    fn set_lora(&mut self, lora: LoraSet) -> Result<()>;

    /// Adds dense deltas onto named projections (multi-concept merge).
    fn set_merged_deltas(&mut self, deltas: BTreeMap<String, Matrix>) -> Result<()>;

    /// `(d_out, d_in)` of every projection that accepts low-rank deltas.
    fn lora_target_dims(&self) -> BTreeMap<String, (usize, usize)>;

    fn snapshot_frozen(&self) -> Frozen<Self> {
        Frozen(Arc::new(self.clone()))
    }
}

/// Immutable shared copy of a backbone.
#[derive(Debug)]
pub struct Frozen<B>(Arc<B>);

impl<B> Clone for Frozen<B> {
    fn clone(&self) -> Self {
        Self(Arc::clone(&self.0))
    }
}

impl<B> Deref for Frozen<B> {
    type Target = B;

    fn deref(&self) -> &B {
        &self.0
    }
}

/// Resolves a backbone by configuration name.
pub fn backbone_by_name(name: &str) -> Result<ToyBackbone> {
    match name {
        "toy" => Ok(ToyBackbone::new(ToyConfig::default())),
        other => Err(Error::UnknownBackbone(other.to_string())),
    }
}
