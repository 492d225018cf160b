//! Sampling from learned concepts: single-concept generation and
//! multi-concept composition without joint training.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Conditioning, DifferentiableBackbone, HashTokenizer, PromptWithSlot};
use crate::checkpoint::ConceptCheckpoint;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::latent::LatentTensor;
use crate::mat::Matrix;

pub const DEFAULT_STEPS: usize = 50;

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub checkpoints: Vec<ConceptCheckpoint>,
    /// Free text with one `*` marker per concept, each followed by its class word.
    pub prompt_template: String,
    pub seed: u64,
    pub steps: usize,
    pub samples: usize,
    /// Treat a backbone id that differs from a checkpoint manifest as an error.
    pub strict_backbone: bool,
}

impl GenerationRequest {
    pub fn new(checkpoints: Vec<ConceptCheckpoint>, prompt_template: &str) -> Self {
        Self {
            checkpoints,
            prompt_template: prompt_template.to_string(),
            seed: 0,
            steps: DEFAULT_STEPS,
            samples: 1,
            strict_backbone: false,
        }
    }
}

/// How low-rank deltas were applied to the base model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaMerge {
    None,
    Single,
    /// Deltas of several checkpoints added together; not guaranteed to
    /// preserve each concept.
    Summed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotBinding {
    pub position: usize,
    pub slot_word: String,
    pub concept_id: String,
    pub class_word: String,
    pub source_image: Option<String>,
    pub source_mask: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub index: usize,
    pub seed: u64,
    pub latent: LatentTensor,
    pub image: RgbImage,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub prompt: String,
    pub bindings: Vec<SlotBinding>,
    pub delta_merge: DeltaMerge,
    pub conditioning: Conditioning,
    pub samples: Vec<Sample>,
    pub warnings: Vec<String>,
}

/// Sidecar written next to every PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub prompt: String,
    pub request_seed: u64,
    pub sample_seed: u64,
    pub sample_index: usize,
    pub steps: usize,
    pub samples: usize,
    pub backbone_id: String,
    /// Sorted, so the record does not depend on argument order.
    pub checkpoint_ids: Vec<String>,
    pub bindings: Vec<SlotBinding>,
    pub delta_merge: DeltaMerge,
    pub warnings: Vec<String>,
}

fn ordering_key(ck: &ConceptCheckpoint) -> (String, String, Vec<u32>) {
    (
        ck.concept_id.clone(),
        ck.class_word.clone(),
        ck.embedding.iter().map(|v| v.to_bits()).collect(),
    )
}

/// Binds checkpoints to slots by class word; leftover slots take the
/// remaining checkpoints in sorted order.
fn bind<'a>(
    prompt: &PromptWithSlot,
    checkpoints: &'a [ConceptCheckpoint],
    warnings: &mut Vec<String>,
) -> Result<Vec<(usize, &'a ConceptCheckpoint)>> {
    if prompt.slots.len() != checkpoints.len() {
        return Err(Error::SlotCount {
            expected: prompt.slots.len(),
            supplied: checkpoints.len(),
        });
    }
    let mut sorted: Vec<&ConceptCheckpoint> = checkpoints.iter().collect();
    sorted.sort_by_key(|c| ordering_key(c));
    let mut seen = BTreeMap::new();
    for ck in &sorted {
        let word = HashTokenizer::normalize(&ck.class_word);
        if seen.insert(word.clone(), ()).is_some() {
            warnings.push(format!("class word `{word}` is shared by several checkpoints"));
        }
    }

    let mut used = vec![false; sorted.len()];
    let mut bound: Vec<Option<usize>> = vec![None; prompt.slots.len()];
    for (si, slot) in prompt.slots.iter().enumerate() {
        if let Some(ci) = (0..sorted.len())
            .find(|&ci| !used[ci] && HashTokenizer::normalize(&sorted[ci].class_word) == slot.concept)
        {
            used[ci] = true;
            bound[si] = Some(ci);
        }
    }
    let mut out = Vec::with_capacity(bound.len());
    for (si, b) in bound.iter().enumerate() {
        let ci = match b {
            Some(ci) => *ci,
            None => {
                let ci = (0..sorted.len()).find(|&ci| !used[ci]).expect("counts match");
                used[ci] = true;
                warnings.push(format!(
                    "slot `* {}` has no checkpoint with that class word; bound `{}` by position",
                    prompt.slots[si].concept, sorted[ci].concept_id
                ));
                ci
            }
        };
        out.push((si, sorted[ci]));
    }
    Ok(out)
}

/// Sum of `B A` over every checkpoint carrying deltas, in sorted order.
fn merged_deltas(checkpoints: &[&ConceptCheckpoint]) -> (BTreeMap<String, Matrix>, DeltaMerge) {
    let mut sum: BTreeMap<String, Matrix> = BTreeMap::new();
    let mut n = 0;
    for ck in checkpoints {
        let Some(set) = &ck.lora_deltas else { continue };
        n += 1;
        for (name, f) in &set.factors {
            let d = f.delta();
            match sum.get_mut(name) {
                Some(acc) => acc.add_assign(&d),
                None => {
                    sum.insert(name.clone(), d);
                }
            }
        }
    }
    let merge = match n {
        0 => DeltaMerge::None,
        1 => DeltaMerge::Single,
        _ => DeltaMerge::Summed,
    };
    (sum, merge)
}

/// Conditioning with every slot row replaced by its bound embedding.
pub fn build_conditioning<B: Backbone>(
    backbone: &B,
    prompt: &PromptWithSlot,
    bound: &[(usize, &ConceptCheckpoint)],
) -> Result<Conditioning> {
    let mut cond = backbone.token_embeddings(prompt);
    for &(si, ck) in bound {
        let e = ck.embedding_f64();
        if e.len() != backbone.embed_dim() {
            return Err(Error::EmbeddingDim {
                expected: backbone.embed_dim(),
                actual: e.len(),
            });
        }
        cond.rows[prompt.slots[si].position] = e;
    }
    Ok(cond)
}

/// Deterministic reverse loop from `x_T` over `steps` evenly spaced timesteps.
pub fn sample_latent<B: Backbone>(
    backbone: &B,
    cond: &Conditioning,
    x_t: LatentTensor,
    steps: usize,
) -> Result<LatentTensor> {
    let sched = backbone.schedule();
    let ts = sched.reverse_timesteps(steps);
    let mut x = x_t;
    for (i, &t) in ts.iter().enumerate() {
        let eps = backbone.predict_noise(&x, t, cond)?;
        x = sched.reverse_step(&x, &eps, t, ts.get(i + 1).copied())?;
    }
    Ok(x)
}

pub fn initial_noise<B: Backbone>(backbone: &B, seed: u64) -> LatentTensor {
    let shape = backbone.latent_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..shape.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    LatentTensor::from_raw(shape, data)
}

fn run<B: DifferentiableBackbone>(req: &GenerationRequest, backbone: &B) -> Result<Generation> {
    if req.samples == 0 || req.steps == 0 {
        return Err(Error::Config("samples and steps must be positive".into()));
    }
    let mut warnings = Vec::new();
    for ck in &req.checkpoints {
        if ck.manifest.backbone_id != backbone.id() {
            let err = Error::BackboneMismatch {
                checkpoint: ck.concept_id.clone(),
                expected: ck.manifest.backbone_id.clone(),
                actual: backbone.id().to_string(),
            };
            if req.strict_backbone {
                return Err(err);
            }
            warnings.push(err.to_string());
        }
    }
    let prompt = backbone.tokenize(&req.prompt_template)?;
    let bound = bind(&prompt, &req.checkpoints, &mut warnings)?;
    let cond = build_conditioning(backbone, &prompt, &bound)?;

    let mut sorted: Vec<&ConceptCheckpoint> = req.checkpoints.iter().collect();
    sorted.sort_by_key(|c| ordering_key(c));
    let (deltas, delta_merge) = merged_deltas(&sorted);
    if delta_merge == DeltaMerge::Summed {
        warnings.push("low-rank deltas of several checkpoints were summed (best effort)".into());
    }
    let mut adapted = backbone.clone();
    if adapted.lora().is_some() {
        return Err(Error::Config("generation expects a base backbone without live deltas".into()));
    }
    adapted.set_merged_deltas(deltas)?;

    let samples = (0..req.samples)
        .map(|i| {
            let seed = req.seed.wrapping_add(i as u64);
            let latent = sample_latent(&adapted, &cond, initial_noise(&adapted, seed), req.steps)?;
            let image = adapted.decode_latent(&latent)?;
            Ok(Sample {
                index: i,
                seed,
                latent,
                image,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let bindings = bound
        .iter()
        .map(|&(si, ck)| SlotBinding {
            position: prompt.slots[si].position,
            slot_word: prompt.slots[si].concept.clone(),
            concept_id: ck.concept_id.clone(),
            class_word: ck.class_word.clone(),
            source_image: ck.manifest.source_image.clone(),
            source_mask: ck.manifest.source_mask.clone(),
        })
        .collect();
    Ok(Generation {
        prompt: prompt.render(),
        bindings,
        delta_merge,
        conditioning: cond,
        samples,
        warnings,
    })
}

/// Single-concept generation.
pub fn generate<B: DifferentiableBackbone>(req: &GenerationRequest, backbone: &B) -> Result<Generation> {
    if req.checkpoints.len() != 1 {
        return Err(Error::SlotCount {
            expected: 1,
            supplied: req.checkpoints.len(),
        });
    }
    run(req, backbone)
}

/// Multi-concept generation. Results do not depend on checkpoint order.
pub fn compose<B: DifferentiableBackbone>(req: &GenerationRequest, backbone: &B) -> Result<Generation> {
    if req.checkpoints.is_empty() {
        return Err(Error::SlotCount {
            expected: 1,
            supplied: 0,
        });
    }
    let mut ids: Vec<&str> = req.checkpoints.iter().map(|c| c.manifest.backbone_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() > 1 {
        return Err(Error::BackboneMismatch {
            checkpoint: req.checkpoints.iter().map(|c| c.concept_id.as_str()).collect::<Vec<_>>().join(","),
            expected: ids[0].to_string(),
            actual: ids[1..].join(","),
        });
    }
    run(req, backbone)
}

pub fn sample_stem(index: usize) -> String {
    format!("sample_{index:03}")
}

/// Writes `sample_NNN.png` and `sample_NNN.json` for every sample.
pub fn write_outputs(
    dir: &Path,
    req: &GenerationRequest,
    generation: &Generation,
    backbone_id: &str,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut ids: Vec<String> = req.checkpoints.iter().map(|c| c.concept_id.clone()).collect();
    ids.sort();
    let mut written = Vec::new();
    for s in &generation.samples {
        let stem = sample_stem(s.index);
        let png = dir.join(format!("{stem}.png"));
        s.image.save(&png)?;
        let sidecar = SampleSidecar {
            prompt: generation.prompt.clone(),
            request_seed: req.seed,
            sample_seed: s.seed,
            sample_index: s.index,
            steps: req.steps,
            samples: req.samples,
            backbone_id: backbone_id.to_string(),
            checkpoint_ids: ids.clone(),
            bindings: generation.bindings.clone(),
            delta_merge: generation.delta_merge,
            warnings: generation.warnings.clone(),
        };
        let mut json = serde_json::to_string_pretty(&sidecar)?;
        json.push('\n');
        fs::write(dir.join(format!("{stem}.json")), json)?;
        written.push(png);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{LoraConfig, LoraSet, ToyBackbone, ToyConfig};
    use crate::checkpoint::tests::sample_checkpoint;

    fn toy() -> ToyBackbone {
        ToyBackbone::new(ToyConfig::default())
    }

    fn concept(id: &str, class: &str, fill: f32, with_lora: bool) -> ConceptCheckpoint {
        let mut ck = sample_checkpoint(false);
        ck.concept_id = id.into();
        ck.class_word = class.into();
        ck.manifest.concept_id = id.into();
        ck.manifest.class_word = class.into();
        ck.embedding = (0..16).map(|i| fill + i as f32 * 0.01).collect();
        if with_lora {
            let bb = toy();
            let mut set = LoraSet::init(&LoraConfig::default(), &bb.lora_target_dims()).unwrap();
            for (k, f) in set.factors.values_mut().enumerate() {
                for (i, v) in f.b.data.iter_mut().enumerate() {
                    *v = ((i + k) as f64 * 0.37).sin() * 0.05 * fill as f64;
                }
            }
            ck.lora_deltas = Some(set);
        }
        ck
    }

    #[test]
    fn same_seed_same_images_and_seed_fan_out() {
        let bb = toy();
        let mut req = GenerationRequest::new(vec![concept("a", "face", 0.3, false)], "a photo of * face");
        req.samples = 3;
        req.steps = 10;
        let g1 = generate(&req, &bb).unwrap();
        let g2 = generate(&req, &bb).unwrap();
        assert_eq!(g1.samples.len(), 3);
        for (a, b) in g1.samples.iter().zip(&g2.samples) {
            assert_eq!(a.latent, b.latent);
            assert_eq!(a.image, b.image);
        }
        let seeds: Vec<u64> = g1.samples.iter().map(|s| s.seed).collect();
        assert_eq!(seeds, vec![0, 1, 2]);
        assert_ne!(g1.samples[0].latent, g1.samples[1].latent);
        assert_eq!(g1.delta_merge, DeltaMerge::None);
    }

    #[test]
    fn slot_count_must_match() {
        let bb = toy();
        let req = GenerationRequest::new(
            vec![concept("a", "face", 0.3, false)],
            "* face with * hair",
        );
        let err = compose(&req, &bb).unwrap_err();
        assert_eq!(
            err.to_string(),
            "template has 2 slot(s) but 1 checkpoint(s) were supplied"
        );
        let two = GenerationRequest::new(
            vec![concept("a", "face", 0.3, false), concept("b", "hair", 0.5, false)],
            "* face",
        );
        assert!(matches!(generate(&two, &bb), Err(Error::SlotCount { expected: 1, supplied: 2 })));
    }

    #[test]
    fn conditioning_holds_both_embeddings_at_their_slots() {
        let bb = toy();
        let face = concept("f", "face", 0.3, false);
        let hair = concept("h", "hair", 0.7, false);
        let mut req = GenerationRequest::new(vec![hair.clone(), face.clone()], "* face with * hair");
        req.steps = 2;
        let g = compose(&req, &bb).unwrap();
        assert_eq!(g.conditioning.rows[1], face.embedding_f64());
        assert_eq!(g.conditioning.rows[4], hair.embedding_f64());
        assert_eq!(g.bindings[0].concept_id, "f");
        assert!(g.warnings.is_empty());
    }

    #[test]
    fn composition_is_order_invariant() {
        let bb = toy();
        let a = concept("f", "face", 0.3, true);
        let b = concept("h", "hair", 0.7, true);
        let mut r1 = GenerationRequest::new(vec![a.clone(), b.clone()], "* face with * hair");
        r1.steps = 8;
        let mut r2 = r1.clone();
        r2.checkpoints = vec![b, a];
        let (g1, g2) = (compose(&r1, &bb).unwrap(), compose(&r2, &bb).unwrap());
        assert_eq!(g1.delta_merge, DeltaMerge::Summed);
        assert_eq!(g1.samples[0].latent, g2.samples[0].latent);
        assert_eq!(g1.bindings, g2.bindings);
    }

    #[test]
    fn single_composition_equals_generate() {
        let bb = toy();
        let mut req = GenerationRequest::new(vec![concept("f", "face", 0.3, true)], "* face smiling");
        req.steps = 6;
        let (g, c) = (generate(&req, &bb).unwrap(), compose(&req, &bb).unwrap());
        assert_eq!(g.samples[0].latent, c.samples[0].latent);
        assert_eq!(g.delta_merge, DeltaMerge::Single);
    }

    #[test]
    fn delta_free_checkpoint_adds_nothing() {
        let with = concept("f", "face", 0.3, true);
        let without = concept("h", "hair", 0.7, false);
        let (alone, _) = merged_deltas(&[&with]);
        let (both, merge) = merged_deltas(&[&with, &without]);
        assert_eq!(alone, both);
        assert_eq!(merge, DeltaMerge::Single);
    }

    #[test]
    fn unmatched_class_binds_by_position_with_warning() {
        let bb = toy();
        let mut req = GenerationRequest::new(vec![concept("x", "cat", 0.3, false)], "* dog");
        req.steps = 2;
        let g = generate(&req, &bb).unwrap();
        assert_eq!(g.bindings[0].concept_id, "x");
        assert!(g.warnings.iter().any(|w| w.contains("by position")));
    }

    #[test]
    fn backbone_mismatch_warns_or_fails() {
        let bb = toy();
        let mut ck = concept("x", "face", 0.3, false);
        ck.manifest.backbone_id = "other".into();
        let mut req = GenerationRequest::new(vec![ck], "* face");
        req.steps = 2;
        assert!(!generate(&req, &bb).unwrap().warnings.is_empty());
        req.strict_backbone = true;
        assert!(matches!(generate(&req, &bb), Err(Error::BackboneMismatch { .. })));
    }

    #[test]
    fn writes_png_and_sidecar() {
        let bb = toy();
        let mut req = GenerationRequest::new(vec![concept("f", "face", 0.3, false)], "* face");
        req.steps = 2;
        req.samples = 2;
        let g = generate(&req, &bb).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_outputs(dir.path(), &req, &g, bb.id()).unwrap();
        assert_eq!(files.len(), 2);
        let side: SampleSidecar =
            serde_json::from_str(&fs::read_to_string(dir.path().join("sample_001.json")).unwrap()).unwrap();
        assert_eq!(side.sample_seed, 1);
        assert_eq!(side.checkpoint_ids, vec!["f".to_string()]);
        let img = RgbImage::load(&files[0]).unwrap();
        assert_eq!((img.height, img.width), (64, 64));
    }
}
