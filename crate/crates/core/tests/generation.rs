use std::path::PathBuf;

use concept_insert::backbone::{Backbone, ToyBackbone, ToyConfig};
use concept_insert::checkpoint::ConceptCheckpoint;
use concept_insert::encoder::EncoderConfig;
use concept_insert::fixtures;
use concept_insert::inference::{self, GenerationRequest};
use concept_insert::latent::LatentTensor;
use concept_insert::trainer::{train_stage1, train_stage2, ConceptSource, StageConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn checkpoint(bb: &ToyBackbone, stage2: bool) -> ConceptCheckpoint {
    let (img, mask) = (fixtures::concept_image(), fixtures::concept_mask("dog"));
    let src = ConceptSource {
        image: &img,
        mask: &mask,
        class_word: "dog",
        concept_id: "dog",
        source_image: None,
        source_mask: None,
    };
    let mut c1 = StageConfig::stage1();
    c1.iterations = 5;
    let s1 = train_stage1(&src, &c1, &EncoderConfig::default(), bb).unwrap().checkpoint;
    if !stage2 {
        return s1;
    }
    let mut c2 = StageConfig::stage2();
    c2.iterations = 5;
    c2.learning_rate = 1e-2;
    train_stage2(Some(&s1), &src, &c2, bb).unwrap().checkpoint
}

/// Deterministic reverse loop written out from the update equations.
fn reference_trace(bb: &ToyBackbone, cond: &concept_insert::backbone::Conditioning, seed: u64, steps: usize) -> Vec<f64> {
    let shape = bb.latent_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..shape.len()).map(|_| rng.sample(StandardNormal)).collect();
    let last = bb.schedule().num_timesteps() - 1;
    let ts: Vec<usize> = (0..steps)
        .rev()
        .map(|k| 1 + (k as f64 * (last - 1) as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    for (i, &t) in ts.iter().enumerate() {
        let eps = bb
            .predict_noise(&LatentTensor::new(shape, x.clone()).unwrap(), t, cond)
            .unwrap();
        let a = bb.schedule().alpha_bar()[t];
        let x0: Vec<f64> = x
            .iter()
            .zip(eps.data())
            .map(|(xt, e)| (xt - (1.0 - a).sqrt() * e) / a.sqrt())
            .collect();
        x = match ts.get(i + 1) {
            None => x0,
            Some(&tp) => {
                let ap = bb.schedule().alpha_bar()[tp];
                x0.iter().zip(eps.data()).map(|(x0, e)| ap.sqrt() * x0 + (1.0 - ap).sqrt() * e).collect()
            }
        };
    }
    x
}

#[test]
fn sampler_matches_reference_trace() {
    let bb = ToyBackbone::new(ToyConfig::default());
    let ck = checkpoint(&bb, false);
    let mut req = GenerationRequest::new(vec![ck], "a photo of * dog on a green lawn");
    req.seed = 42;
    req.steps = 20;
    req.samples = 2;
    let gen = inference::generate(&req, &bb).unwrap();
    for s in &gen.samples {
        assert_eq!(s.seed, 42 + s.index as u64);
        let want = reference_trace(&bb, &gen.conditioning, s.seed, req.steps);
        let worst = s.latent.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-12, "sample {}: {worst:e}", s.index);
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Golden {
    prompt: String,
    seed: u64,
    steps: usize,
    latent_head: Vec<f64>,
    latent_sum: f64,
    image_sha256: String,
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_generate.json")
}

/// Regenerate with `UPDATE_GOLDEN=1 cargo test --test generation`.
#[test]
fn stage_two_generation_matches_golden() {
    let bb = ToyBackbone::new(ToyConfig::default());
    let ck = checkpoint(&bb, true);
    assert!(ck.lora_deltas.is_some());
    let mut req = GenerationRequest::new(vec![ck], "* dog in a blue sweater");
    req.seed = 7;
    req.steps = 25;
    let gen = inference::generate(&req, &bb).unwrap();
    let s = &gen.samples[0];
    let got = Golden {
        prompt: gen.prompt.clone(),
        seed: s.seed,
        steps: req.steps,
        latent_head: s.latent.data()[..8].to_vec(),
        latent_sum: s.latent.data().iter().sum(),
        image_sha256: Sha256::digest(s.image.to_rgb8().as_raw())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect(),
    };
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(golden_path(), serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
    }
    let want: Golden = serde_json::from_str(&std::fs::read_to_string(golden_path()).unwrap()).unwrap();
    assert_eq!(got.prompt, want.prompt);
    assert_eq!((got.seed, got.steps), (want.seed, want.steps));
    for (a, b) in got.latent_head.iter().zip(&want.latent_head) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    assert!((got.latent_sum - want.latent_sum).abs() < 1e-8);
    assert_eq!(got.image_sha256, want.image_sha256);
}

#[test]
fn composition_is_invariant_to_checkpoint_order() {
    let bb = ToyBackbone::new(ToyConfig::default());
    let dog = checkpoint(&bb, true);
    let (img, mask) = (fixtures::second_image(), fixtures::second_mask("hat"));
    let src = ConceptSource {
        image: &img,
        mask: &mask,
        class_word: "hat",
        concept_id: "hat",
        source_image: None,
        source_mask: None,
    };
    let mut c1 = StageConfig::stage1();
    c1.iterations = 5;
    let s1 = train_stage1(&src, &c1, &EncoderConfig::default(), &bb).unwrap().checkpoint;
    let mut c2 = StageConfig::stage2();
    c2.iterations = 5;
    c2.learning_rate = 1e-2;
    let hat = train_stage2(Some(&s1), &src, &c2, &bb).unwrap().checkpoint;

    let run = |cks: Vec<ConceptCheckpoint>| {
        let mut req = GenerationRequest::new(cks, "* dog wearing * hat");
        req.seed = 3;
        req.steps = 10;
        req.samples = 2;
        let dir = tempfile::tempdir().unwrap();
        let gen = inference::compose(&req, &bb).unwrap();
        inference::write_outputs(dir.path(), &req, &gen, bb.id()).unwrap();
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let a = run(vec![dog.clone(), hat.clone()]);
    let b = run(vec![hat, dog]);
    assert_eq!(a.len(), 4);
    assert_eq!(a, b);
}
